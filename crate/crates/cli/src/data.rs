use anyhow::{Context, Result};
use cht_core::episodes::{load_pool, make_multi_domain_pools, ClassPool, PoolSource, SyntheticParams};

use crate::config::DataConfig;

/// Training and held-out pools, one pair per domain.
#[derive(Clone, Debug)]
pub struct Pools {
    pub train: Vec<ClassPool>,
    pub test: Vec<ClassPool>,
}

pub fn build_pools(cfg: &DataConfig) -> Result<Pools> {
    let shape = cfg.shape();
    let raw = match cfg.format() {
        None => {
            let s = &cfg.synthetic;
            let params = SyntheticParams {
                noise: s.noise,
                max_shift: s.max_shift,
                ..SyntheticParams::new(s.num_classes, s.samples_per_class, shape, s.seed)
            };
            make_multi_domain_pools(&params, s.domains)?
        }
        Some(format) => cfg
            .roots
            .iter()
            .map(|root| {
                let mut src = PoolSource::new(root, format);
                src.resize = Some((shape.height, shape.width));
                src.min_samples_per_class = cfg.min_samples_per_class;
                let pool = load_pool(&src).with_context(|| format!("data.roots: {}", root.display()))?;
                anyhow::ensure!(
                    pool.shape == shape,
                    "pool {} has images {:?}, config expects {:?}",
                    root.display(),
                    pool.shape,
                    shape
                );
                Ok(pool)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let mut train = Vec::with_capacity(raw.len());
    let mut test = Vec::with_capacity(raw.len());
    for pool in raw {
        let pool = if cfg.standardize { pool.standardized() } else { pool };
        let (a, b) = pool.split_classes(cfg.train_fraction, cfg.split_seed)?;
        train.push(a);
        test.push(b);
    }
    Ok(Pools { train, test })
}
