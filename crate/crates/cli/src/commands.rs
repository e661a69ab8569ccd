use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use metainv_core::analytic::fbp;
use metainv_core::config::{self, Config, GEOM_KEYS, HQS_KEYS, NET_KEYS, SWEEP_KEYS, TRAIN_KEYS};
use metainv_core::geometry::{ImageGrid, Projector, ScanGeometry};
use metainv_core::io::{load_tensor, save_pgm, save_tensor};
use metainv_core::metrics::{dynamic_range, ms_ssim, psnr, ssim};
use metainv_core::network::{self, Checkpoint, InitializerWeights, MetaInvConfig, Sample};
use metainv_core::simulation::{random_phantom, shepp_logan, simulate_sinogram, Noise, NoiseSpec};
use metainv_core::solvers::{hqs_cg, HqsParams};
use metainv_core::{Error, Image, Result, Sinogram, Tensor};

use crate::{Command, Method, PhantomKind};

/// Attaches the path to I/O errors.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {}", path.display(), io))),
        Error::Format(m) => Error::Format(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

fn load_config(path: Option<&Path>, overrides: &[String], allowed: &[&[&str]]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => at(p, Config::load(p))?,
        None => Config::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.ensure_known(allowed)?;
    Ok(cfg)
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    at(path, load_tensor(path))
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    at(path, save_tensor(path, t))
}

fn read_image(path: &Path, grid: Option<ImageGrid>) -> Result<Image> {
    let t = read_tensor(path)?;
    let &[rows, cols] = t.shape() else {
        return Err(Error::Shape(format!("{}: expected a 2D image, got {:?}", path.display(), t.shape())));
    };
    if rows != cols {
        return Err(Error::Shape(format!("{}: image is {}x{}, not square", path.display(), rows, cols)));
    }
    let grid = match grid {
        Some(g) if g.n != rows => {
            return Err(Error::Shape(format!(
                "{}: image is {}x{} but the geometry expects {}x{}",
                path.display(),
                rows,
                rows,
                g.n,
                g.n
            )))
        }
        Some(g) => g,
        None => ImageGrid::with_default_fov(rows)?,
    };
    Image::new(grid, t.into_data())
}

fn read_sinogram(path: &Path, g: &ScanGeometry) -> Result<Sinogram> {
    let t = read_tensor(path)?;
    let &[views, det] = t.shape() else {
        return Err(Error::Shape(format!("{}: expected a 2D sinogram, got {:?}", path.display(), t.shape())));
    };
    let s = Sinogram::new(views, det, t.into_data())?;
    g.check_sinogram(&s).map_err(|e| Error::Shape(format!("{}: {}", path.display(), e)))?;
    Ok(s)
}

fn image_tensor(img: &Image) -> Tensor {
    img.tensor().clone()
}

fn sinogram_tensor(s: &Sinogram) -> Result<Tensor> {
    Tensor::new(vec![s.n_views(), s.n_det()], s.data().to_vec())
}

fn write_image(path: &Path, img: &Image, pgm: Option<&Path>) -> Result<()> {
    write_tensor(path, &image_tensor(img))?;
    if let Some(p) = pgm {
        at(p, save_pgm(p, img.tensor(), None))?;
    }
    Ok(())
}

/// `I0[,sigma_e[,seed]]`.
fn parse_noise(spec: &str) -> Result<Noise> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.is_empty() || parts.len() > 3 {
        return Err(Error::InvalidArgument(format!("--noise '{}' must be I0[,sigma[,seed]]", spec)));
    }
    let bad = |what: &str| Error::InvalidArgument(format!("--noise: cannot parse {} in '{}'", what, spec));
    let i0: f64 = parts[0].parse().map_err(|_| bad("I0"))?;
    let sigma: f64 = parts.get(1).map(|s| s.parse()).transpose().map_err(|_| bad("sigma"))?.unwrap_or(0.0);
    let seed: u64 = parts.get(2).map(|s| s.parse()).transpose().map_err(|_| bad("seed"))?.unwrap_or(0);
    Ok(Noise::Poisson(NoiseSpec::new(i0, sigma, seed)?))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { kind, n, seed, out, pgm } => {
            let grid = ImageGrid::with_default_fov(n)?;
            let img = match kind {
                PhantomKind::SheppLogan => shepp_logan(grid)?,
                PhantomKind::Random => random_phantom(grid, seed)?,
            };
            write_image(&out, &img, pgm.as_deref())
        }
        Command::Project { img, geom, noise, out, overrides } => {
            let cfg = load_config(Some(&geom), &overrides, &[GEOM_KEYS])?;
            let g = config::geometry_from(&cfg)?;
            let image = read_image(&img, Some(g.grid))?;
            let noise = noise.as_deref().map(parse_noise).transpose()?.unwrap_or(Noise::Noiseless);
            let s = simulate_sinogram(&image, &Projector::new(&g)?, noise)?;
            write_tensor(&out, &sinogram_tensor(&s)?)
        }
        Command::Fbp { sino, geom, out, pgm, overrides } => {
            let cfg = load_config(Some(&geom), &overrides, &[GEOM_KEYS])?;
            let g = config::geometry_from(&cfg)?;
            let s = read_sinogram(&sino, &g)?;
            write_image(&out, &fbp(&s, &g)?, pgm.as_deref())
        }
        Command::Reconstruct {
            method,
            sino,
            geom,
            params,
            weights,
            out,
            dump_layers,
            pgm,
            overrides,
        } => {
            let gcfg = load_config(Some(&geom), &[], &[GEOM_KEYS])?;
            let g = config::geometry_from(&gcfg)?;
            let pcfg = load_config(params.as_deref(), &overrides, &[HQS_KEYS, NET_KEYS])?;
            let s = read_sinogram(&sino, &g)?;
            let proj = Arc::new(Projector::new(&g)?);
            let layers = match method {
                Method::Hqscg => {
                    if weights.is_some() {
                        return Err(Error::InvalidArgument("--weights only applies to --method metainv".into()));
                    }
                    let p = config::hqs_from(&pcfg, HqsParams::default())?;
                    hqs_cg(&s, &proj, &p)?.iterates
                }
                Method::Metainv => {
                    let cfg = config::metainv_from(&pcfg)?;
                    let w = match &weights {
                        Some(path) => at(path, Checkpoint::load(path))?.weights,
                        None => InitializerWeights::zeros(cfg.initializer, cfg.layers())?,
                    };
                    if w.spec != cfg.initializer {
                        return Err(Error::Config(format!(
                            "checkpoint initializer {:?} differs from the configured {:?}",
                            w.spec, cfg.initializer
                        )));
                    }
                    network::reconstruct(&s, &proj, &cfg, &w)?
                }
            };
            if let Some(dir) = dump_layers {
                at(&dir, fs::create_dir_all(&dir).map_err(Error::from))?;
                for (k, img) in layers.iter().enumerate() {
                    write_tensor(&dir.join(format!("layer_{:02}.tns", k + 1)), &image_tensor(img))?;
                }
            }
            let last = layers.last().ok_or_else(|| Error::InvalidArgument("no iterations were run".into()))?;
            write_image(&out, last, pgm.as_deref())
        }
        Command::Train { config: path, out_weights, log, overrides } => {
            let cfg = load_config(Some(&path), &overrides, &[GEOM_KEYS, HQS_KEYS, NET_KEYS, TRAIN_KEYS])?;
            train(&cfg, &out_weights, &log)
        }
        Command::InitWeights { config: path, out, zero, overrides } => {
            let cfg = load_config(path.as_deref(), &overrides, &[HQS_KEYS, NET_KEYS])?;
            let mc = config::metainv_from(&cfg)?;
            let weights = if zero {
                InitializerWeights::zeros(mc.initializer, mc.layers())?
            } else {
                InitializerWeights::init(mc.initializer, mc.layers(), cfg.get_or("net.init_seed", 0)?)?
            };
            let ck = Checkpoint { config: mc, weights };
            at(&out, ck.save(&out))
        }
        Command::Eval { rec, gt, report, peak } => {
            let r = read_image(&rec, None)?;
            let t = read_image(&gt, Some(r.grid()))?;
            let peak = peak.unwrap_or_else(|| dynamic_range(t.data()));
            let ms = ms_ssim(&r, &t, Some(peak))?;
            let mut text = String::new();
            writeln!(text, "psnr={}", fmt_metric(psnr(&r, &t, Some(peak))?)).unwrap();
            writeln!(text, "ssim={}", fmt_metric(ssim(&r, &t, Some(peak))?)).unwrap();
            writeln!(text, "ms_ssim={}", fmt_metric(ms.value)).unwrap();
            writeln!(text, "ms_ssim_levels={}", ms.levels).unwrap();
            writeln!(text, "peak={}", peak).unwrap();
            at(&report, fs::write(&report, text).map_err(Error::from))
        }
        Command::Sweep { config: path, out, no_timing, overrides } => {
            let cfg = load_config(Some(&path), &overrides, &[GEOM_KEYS, HQS_KEYS, NET_KEYS, SWEEP_KEYS])?;
            sweep(&cfg, &out, no_timing)
        }
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{:.6}", v)
    }
}

fn noise_from(i0: Option<f64>, sigma: f64, seed: u64) -> Result<Noise> {
    match i0 {
        None => Ok(Noise::Noiseless),
        Some(v) if v.is_infinite() => Ok(Noise::Noiseless),
        Some(v) => Ok(Noise::Poisson(NoiseSpec::new(v, sigma, seed)?)),
    }
}

fn train(cfg: &Config, out_weights: &Path, log: &Path) -> Result<()> {
    let g = config::geometry_from(cfg)?;
    let mc = config::metainv_from(cfg)?;
    let tc = config::train_from(cfg)?;
    let count: usize = cfg.get_or("data.count", 50)?;
    let seed: u64 = cfg.get_or("data.seed", 0)?;
    let i0: Option<f64> = cfg.get("data.i0")?;
    let sigma: f64 = cfg.get_or("data.sigma_e", 0.0)?;
    let proj = Arc::new(Projector::new(&g)?);
    let dataset = (0..count as u64)
        .map(|i| {
            Ok(Sample {
                phantom: random_phantom(g.grid, seed + i)?,
                projector: Arc::clone(&proj),
                noise: noise_from(i0, sigma, seed + i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let init = InitializerWeights::init(mc.initializer, mc.layers(), cfg.get_or("net.init_seed", 0)?)?;
    let report = network::train(&dataset, &mc, &tc, init)?;
    let mut text = String::from("epoch,loss\n");
    for (e, l) in report.epoch_loss.iter().enumerate() {
        writeln!(text, "{},{:e}", e + 1, l).unwrap();
    }
    at(log, fs::write(log, text).map_err(Error::from))?;
    let ck = Checkpoint {
        config: mc,
        weights: report.weights,
    };
    at(out_weights, ck.save(out_weights))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn sweep(cfg: &Config, out: &Path, no_timing: bool) -> Result<()> {
    let mut gcfg = cfg.clone();
    let views: Vec<usize> = cfg.get_list("sweep.views")?.unwrap_or_else(|| vec![30, 60, 120, 180]);
    // "inf" selects noiseless data.
    let levels: Vec<f64> = cfg.get_list("sweep.i0")?.unwrap_or_else(|| vec![f64::INFINITY]);
    let phantoms: u64 = cfg.get_or("sweep.phantoms", 10)?;
    let seed: u64 = cfg.get_or("sweep.seed", 0)?;
    let methods: Vec<String> = cfg
        .get_list("sweep.methods")?
        .unwrap_or_else(|| vec!["fbp".to_string(), "hqscg".to_string()]);
    for m in &methods {
        if !matches!(m.as_str(), "fbp" | "hqscg" | "metainv") {
            return Err(Error::Config(format!("unknown sweep method '{}'", m)));
        }
    }
    if phantoms == 0 || views.is_empty() || levels.is_empty() {
        return Err(Error::Config("sweep needs at least one phantom, view count and noise level".into()));
    }
    let hqs = config::hqs_from(cfg, HqsParams::default())?;
    let net: Option<(MetaInvConfig, InitializerWeights)> = if methods.iter().any(|m| m == "metainv") {
        let mc = config::metainv_from(cfg)?;
        let w = match cfg.get_str("sweep.weights") {
            Some(p) => at(Path::new(p), Checkpoint::load(p))?.weights,
            None => InitializerWeights::zeros(mc.initializer, mc.layers())?,
        };
        Some((mc, w))
    } else {
        None
    };

    let mut csv = String::from("views,I0,method,psnr_mean,psnr_std,ssim_mean,ssim_std,seconds\n");
    for &v in &views {
        gcfg.set("geom.n_views", &v.to_string());
        let g = config::geometry_from(&gcfg)?;
        let proj = Arc::new(Projector::new(&g)?);
        for &i0 in &levels {
            let mut problems = Vec::new();
            for p in 0..phantoms {
                let img = random_phantom(g.grid, seed + p)?;
                let y = simulate_sinogram(&img, &proj, noise_from(Some(i0), 0.0, seed + p)?)?;
                problems.push((img, y));
            }
            for m in &methods {
                let start = Instant::now();
                let (mut ps, mut ss) = (Vec::new(), Vec::new());
                for (img, y) in &problems {
                    let rec = match m.as_str() {
                        "fbp" => fbp(y, &g)?,
                        "hqscg" => hqs_cg(y, &proj, &hqs)?.image,
                        _ => {
                            let (mc, w) = net.as_ref().expect("network configured above");
                            network::reconstruct(y, &proj, mc, w)?.pop().expect("at least one layer")
                        }
                    };
                    let peak = dynamic_range(img.data());
                    ps.push(psnr(&rec, img, Some(peak))?);
                    ss.push(ssim(&rec, img, Some(peak))?);
                }
                let secs = if no_timing { 0.0 } else { start.elapsed().as_secs_f64() };
                let (pm, pd) = mean_std(&ps);
                let (sm, sd) = mean_std(&ss);
                let i0s = if i0.is_infinite() { "inf".to_string() } else { format!("{:e}", i0) };
                writeln!(csv, "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3}", v, i0s, m, pm, pd, sm, sd, secs).unwrap();
            }
        }
    }
    at(out, fs::write(out, csv).map_err(Error::from))
}
