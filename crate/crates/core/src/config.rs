//! Flat `key = value` configuration with namespaced keys
//! (`geom.n_views`, `hqs.lambda0`, `train.lr`, …).
//!
//! `#` starts a comment. Later sources override earlier ones through
//! [`Config::set`] / [`Config::apply_overrides`]. Unknown keys are rejected
//! so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{make_geometry, Beam, FanDistances, ImageGrid, ScanGeometry};
use crate::network::{InitializerSpec, MetaInvConfig, TrainConfig};
use crate::solvers::{HqsParams, ThresholdMode};

pub const GEOM_KEYS: &[&str] = &[
    "geom.beam",
    "geom.n",
    "geom.fov",
    "geom.n_views",
    "geom.n_det",
    "geom.src_to_center",
    "geom.det_to_center",
];

pub const HQS_KEYS: &[&str] = &[
    "hqs.lambda0",
    "hqs.d_lambda",
    "hqs.lambda_floor",
    "hqs.gamma0",
    "hqs.d_gamma",
    "hqs.gamma_floor",
    "hqs.k_max",
    "hqs.inner_iters",
    "hqs.cg_tol",
    "hqs.rel_tol",
    "hqs.early_stop",
    "hqs.threshold_mode",
];

pub const NET_KEYS: &[&str] = &[
    "net.layers",
    "net.depth",
    "net.width",
    "net.shared",
    "net.init_seed",
    "loss.mu1",
    "loss.mu2",
];

pub const TRAIN_KEYS: &[&str] = &[
    "train.lr",
    "train.epochs",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.seed",
    "train.shuffle",
    "data.count",
    "data.seed",
    "data.i0",
    "data.sigma_e",
];

pub const SWEEP_KEYS: &[&str] = &[
    "sweep.views",
    "sweep.i0",
    "sweep.phantoms",
    "sweep.seed",
    "sweep.methods",
    "sweep.weights",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{}'", i + 1, line))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{}'", i + 1, k)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Applies `key=value` strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o)))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    /// Merges `other` on top of `self`.
    pub fn merged(mut self, other: &Config) -> Self {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse {} = '{}'", key, v))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("cannot parse '{}' in {}", s.trim(), key)))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Errors on any key not listed in `allowed`.
    pub fn ensure_known(&self, allowed: &[&[&str]]) -> Result<()> {
        for k in self.keys() {
            if !allowed.iter().any(|set| set.contains(&k)) {
                return Err(Error::Config(format!("unknown key '{}'", k)));
            }
        }
        Ok(())
    }
}

fn flag(cfg: &Config, key: &str, default: bool) -> Result<bool> {
    match cfg.get_str(key) {
        None => Ok(default),
        Some("true" | "1" | "yes") => Ok(true),
        Some("false" | "0" | "no") => Ok(false),
        Some(v) => Err(Error::Config(format!("{} = '{}' is not a boolean", key, v))),
    }
}

pub fn grid_from(cfg: &Config) -> Result<ImageGrid> {
    let n: usize = cfg
        .get("geom.n")?
        .ok_or_else(|| Error::Config("geom.n is required".into()))?;
    let fov = cfg.get_or("geom.fov", crate::geometry::DEFAULT_FIELD_OF_VIEW)?;
    ImageGrid::new(n, fov / n as f64)
}

pub fn geometry_from(cfg: &Config) -> Result<ScanGeometry> {
    let grid = grid_from(cfg)?;
    let beam: Beam = cfg.get_or("geom.beam", Beam::Fan)?;
    let views: usize = cfg
        .get("geom.n_views")?
        .ok_or_else(|| Error::Config("geom.n_views is required".into()))?;
    let n_det = cfg.get("geom.n_det")?;
    let d = FanDistances::default_for(&grid);
    let distances = FanDistances {
        src_to_center: cfg.get_or("geom.src_to_center", d.src_to_center)?,
        det_to_center: cfg.get_or("geom.det_to_center", d.det_to_center)?,
    };
    make_geometry(beam, views, n_det, grid, Some(distances))
}

/// HQS settings layered over `base`.
pub fn hqs_from(cfg: &Config, base: HqsParams) -> Result<HqsParams> {
    let p = HqsParams {
        lambda0: cfg.get_or("hqs.lambda0", base.lambda0)?,
        d_lambda: cfg.get_or("hqs.d_lambda", base.d_lambda)?,
        lambda_floor: cfg.get_or("hqs.lambda_floor", base.lambda_floor)?,
        gamma0: cfg.get_or("hqs.gamma0", base.gamma0)?,
        d_gamma: cfg.get_or("hqs.d_gamma", base.d_gamma)?,
        gamma_floor: cfg.get_or("hqs.gamma_floor", base.gamma_floor)?,
        k_max: cfg.get_or("hqs.k_max", base.k_max)?,
        inner_iters: cfg.get_or("hqs.inner_iters", base.inner_iters)?,
        cg_tol: cfg.get_or("hqs.cg_tol", base.cg_tol)?,
        rel_tol: cfg.get_or("hqs.rel_tol", base.rel_tol)?,
        early_stop: flag(cfg, "hqs.early_stop", base.early_stop)?,
        threshold_mode: cfg.get_or::<ThresholdMode>("hqs.threshold_mode", base.threshold_mode)?,
    };
    p.validate()?;
    Ok(p)
}

/// Network settings. The layer count comes from `net.layers` (default 6)
/// and the outer early stop is always off.
pub fn metainv_from(cfg: &Config) -> Result<MetaInvConfig> {
    let d = MetaInvConfig::default();
    let layers = cfg.get_or("net.layers", d.layers())?;
    let mut hqs = hqs_from(cfg, d.hqs)?;
    hqs.k_max = layers;
    hqs.early_stop = false;
    let c = MetaInvConfig {
        hqs,
        initializer: InitializerSpec {
            depth: cfg.get_or("net.depth", d.initializer.depth)?,
            width: cfg.get_or("net.width", d.initializer.width)?,
            kernel: d.initializer.kernel,
            shared: flag(cfg, "net.shared", d.initializer.shared)?,
        },
        mu1: cfg.get_or("loss.mu1", d.mu1)?,
        mu2: cfg.get_or("loss.mu2", d.mu2)?,
    };
    c.validate()?;
    Ok(c)
}

pub fn train_from(cfg: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let t = TrainConfig {
        learning_rate: cfg.get_or("train.lr", d.learning_rate)?,
        epochs: cfg.get_or("train.epochs", d.epochs)?,
        batch_size: cfg.get_or("train.batch_size", d.batch_size)?,
        beta1: cfg.get_or("train.beta1", d.beta1)?,
        beta2: cfg.get_or("train.beta2", d.beta2)?,
        eps: cfg.get_or("train.eps", d.eps)?,
        seed: cfg.get_or("train.seed", d.seed)?,
        shuffle: flag(cfg, "train.shuffle", d.shuffle)?,
    };
    t.validate()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut c = Config::parse("# scan\ngeom.n = 32\n\ngeom.n_views=10 # sparse\nhqs.lambda0 = 0.01\n").unwrap();
        assert_eq!(c.get::<usize>("geom.n").unwrap(), Some(32));
        assert_eq!(c.get_str("geom.n_views"), Some("10"));
        c.apply_overrides(&["geom.n_views=20"]).unwrap();
        assert_eq!(c.get::<usize>("geom.n_views").unwrap(), Some(20));
        assert!(c.apply_overrides(&["oops"]).is_err());
        assert_eq!(c.keys().count(), 3);
    }

    #[test]
    fn malformed_input() {
        assert!(Config::parse("novalue\n").is_err());
        assert!(Config::parse("= 3\n").is_err());
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        let c = Config::parse("geom.n = many\n").unwrap();
        assert!(c.get::<usize>("geom.n").is_err());
        assert!(c.ensure_known(&[HQS_KEYS]).is_err());
        assert!(c.ensure_known(&[GEOM_KEYS]).is_ok());
    }

    #[test]
    fn builders() {
        let c = Config::parse(
            "geom.beam = parallel\ngeom.n = 16\ngeom.n_views = 4\n\
             hqs.inner_iters = 7\nhqs.threshold_mode = direct\nhqs.early_stop = false\n\
             net.layers = 2\nloss.mu2 = 0\ntrain.lr = 0.01\ntrain.shuffle = no\n",
        )
        .unwrap();
        let g = geometry_from(&c).unwrap();
        assert_eq!(g.beam, Beam::Parallel);
        assert_eq!(g.angles.len(), 4);
        assert_eq!(g.grid.pixel_size, 20.0 / 16.0);
        let h = hqs_from(&c, HqsParams::default()).unwrap();
        assert_eq!(h.inner_iters, 7);
        assert_eq!(h.threshold_mode, ThresholdMode::Direct);
        assert!(!h.early_stop);
        let m = metainv_from(&c).unwrap();
        assert_eq!(m.layers(), 2);
        assert_eq!(m.mu2, 0.0);
        let t = train_from(&c).unwrap();
        assert_eq!(t.learning_rate, 0.01);
        assert!(!t.shuffle);
        assert!(geometry_from(&Config::parse("geom.n = 16\n").unwrap()).is_err());
        assert!(hqs_from(&Config::parse("hqs.early_stop = maybe\n").unwrap(), HqsParams::default()).is_err());
        assert!(hqs_from(&Config::parse("hqs.lambda0 = -1\n").unwrap(), HqsParams::default()).is_err());
    }
}
