//! Acceptance suite for the workspace. Run it with
//! `cargo test -p cht-verify --test acceptance`.
