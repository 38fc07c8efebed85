use cht_demo::{one_step_update, prototype_probabilities, unroll_accuracy};

#[test]
fn probabilities_are_normalized_and_nearest_wins() {
    // Two tasks of two 2-D prototypes.
    let protos = [0.0, 0.0, 4.0, 0.0, 0.0, 4.0, 4.0, 4.0];
    let p = prototype_probabilities(&[3.9, 0.1], &protos, 2, 2).unwrap();
    assert_eq!(p.len(), 4 + 2 + 2);
    assert!((p[..4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((p[4..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let best = (0..4).fold(0, |b, i| if p[i] > p[b] { i } else { b });
    assert_eq!(best, 1);
    // Renormalizing the class-incremental mass of task 1 gives its own distribution.
    let mass = p[2] + p[3];
    assert!((p[2] / mass - p[6]).abs() < 1e-12);
}

#[test]
fn probabilities_reject_ragged_input() {
    assert!(prototype_probabilities(&[0.0], &[0.0, 1.0, 2.0], 1, 2).is_err());
    assert!(prototype_probabilities(&[0.0, 0.0], &[0.0, 1.0], 1, 2).is_err());
}

#[test]
fn one_step_update_matches_closed_form() {
    let r = one_step_update(4, 3, 5, 0.5, 2).unwrap();
    assert_eq!(r.len(), 3 + 4 * 5);
    assert!(r[..3].iter().all(|&e| e <= 1e-9), "{:?}", &r[..3]);
}

#[test]
fn unroll_reports_both_triangles() {
    let r = unroll_accuracy(3, 2, 1).unwrap();
    assert_eq!(r.len(), 2 * 6);
    assert!(r.iter().all(|a| (0.0..=1.0).contains(a)));
    assert_eq!(r, unroll_accuracy(3, 2, 1).unwrap());
    assert!(unroll_accuracy(0, 2, 1).is_err());
}
