mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use rslds::experiments::geweke::{run_geweke, GewekeConfig};
use rslds::experiments::lorenz::{gen_lorenz, LorenzConfig};
use rslds::experiments::metrics::{
    affine_recovery_error, calibration_error, duration_summary, geometric_cv, segmentation_accuracy,
};
use rslds::experiments::nascar;
use rslds::fit::{fit, FitConfig, Inference};
use rslds::model::{
    read_json_file, sample_prior, simulate, write_json_file, Dataset, EmissionFamily, Hypers, ModelParams, VariantTag,
};
use rslds::svi::ElboRecord;
use rslds::{Error, Result};

use io::{ensure_dir, read_dataset, read_series, write_series, write_text, Series};

#[derive(Parser)]
#[command(name = "rslds", version, about = "Recurrent switching linear dynamical systems")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Nascar,
    LorenzBernoulli,
    /// Draw parameters from the prior of --model
    Prior,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Gaussian,
    Bernoulli,
}

impl From<Family> for EmissionFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Gaussian => EmissionFamily::Gaussian,
            Family::Bernoulli => EmissionFamily::Bernoulli,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Prior {
    Default,
    /// Unit column covariance on the dynamics, as used for the NASCAR track
    Nascar,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a synthetic dataset with ground truth
    GenerateData {
        #[arg(long, value_enum, default_value = "nascar")]
        generator: Generator,
        #[arg(long, default_value = "rslds")]
        model: String,
        #[arg(long = "K", default_value_t = 2)]
        k: usize,
        #[arg(long = "M", default_value_t = 1)]
        m: usize,
        #[arg(long = "N", default_value_t = 5)]
        n: usize,
        #[arg(long = "T", default_value_t = 2000)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Held-out steps as a 0-based half-open interval a:b
        #[arg(long)]
        mask: Option<String>,
        #[arg(long, value_enum, default_value = "gaussian")]
        emission: Family,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize and fit a model to a dataset
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "rslds")]
        model: String,
        #[arg(long, default_value = "gibbs")]
        inference: String,
        #[arg(long = "K")]
        k: usize,
        #[arg(long = "M")]
        m: usize,
        /// Optional length check against the data
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        mask: Option<String>,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        chains: usize,
        /// Keep every n-th Gibbs sample in the trace
        #[arg(long, default_value_t = 1)]
        thin: usize,
        /// Emission family; read from meta.json next to the data when omitted
        #[arg(long, value_enum)]
        emission: Option<Family>,
        #[arg(long, value_enum, default_value = "default")]
        prior: Prior,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fit (or any run directory) against ground truth
    Evaluate {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Generated sequence (a `generate` output) to compare durations against truth
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Held-out interval; read from the truth's meta.json when omitted
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-simulate a parameter file
    Generate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long = "T", default_value_t = 2000)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint-distribution check of the Gibbs sampler
    GewekeTest {
        #[arg(long, default_value = "rslds")]
        model: String,
        #[arg(long = "K", default_value_t = 2)]
        k: usize,
        #[arg(long = "T", default_value_t = 20)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples per arm
        #[arg(long, default_value_t = 5000)]
        iters: usize,
        #[arg(long)]
        thin: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mask(spec: &str, t_len: usize) -> Result<(usize, usize)> {
    let bad = || Error::InvalidParameter(format!("mask '{spec}' must be a:b with 0 <= a < b <= T={t_len}"));
    let (a, b) = spec.split_once(':').ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a >= b || b > t_len {
        return Err(bad());
    }
    Ok((a, b))
}

fn family_name(f: EmissionFamily) -> &'static str {
    match f {
        EmissionFamily::Gaussian => "gaussian",
        EmissionFamily::Bernoulli => "bernoulli",
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_json_file(path, v)
}

fn generate_data(
    generator: Generator,
    model: &str,
    (k, m, n): (usize, usize, usize),
    t_len: usize,
    seed: u64,
    mask: Option<&str>,
    family: EmissionFamily,
    out: &Path,
) -> Result<()> {
    if t_len == 0 {
        return Err(Error::InvalidParameter("T must be at least 1".into()));
    }
    let mask = mask.map(|s| parse_mask(s, t_len)).transpose()?;
    ensure_dir(out)?;
    let (name, params, z, x, mut data, rho) = match generator {
        Generator::Nascar => {
            let (p, path, data) = nascar::gen_nascar(t_len, seed)?;
            ("nascar", Some(p), path.z, path.x, data, None)
        }
        Generator::LorenzBernoulli => {
            let cfg = LorenzConfig {
                n,
                ..LorenzConfig::default()
            };
            let ld = gen_lorenz(&cfg, t_len, None, seed)?;
            write_json(
                &out.join("glm.json"),
                &json!({
                    "c": ld.c.row_iter().map(|r| r.iter().cloned().collect::<Vec<_>>()).collect::<Vec<_>>(),
                    "d": ld.d.as_slice(),
                }),
            )?;
            ("lorenz-bernoulli", None, ld.z, ld.x, ld.data, Some(ld.rho))
        }
        Generator::Prior => {
            let variant = VariantTag::from_name(model)?;
            let n = if variant.strategy().observes_x() { m } else { n };
            let hypers = Hypers::default_for(m, n)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_prior(&hypers, k, m, n, variant, family, &mut rng)?;
            let (path, data) = simulate(&p, t_len, None, &mut rng)?;
            let rho = match &p.emission {
                rslds::model::Emission::Bernoulli { c, d } => Some(
                    path.x
                        .iter()
                        .map(|xt| (c * xt + d).map(rslds::stickbreak::sigmoid))
                        .collect(),
                ),
                _ => None,
            };
            ("prior", Some(p), path.z, path.x, data, rho)
        }
    };
    if let Some(p) = &params {
        write_json(&out.join("params.json"), &p.to_json())?;
    }
    write_series(
        &out.join("truth.csv"),
        &Series {
            z: Some(&z),
            x: Some(&x),
            y: Some((&data.y, None)),
            ..Series::default()
        },
    )?;
    if let Some((a, b)) = mask {
        data.mask_interval(a, b)?;
    }
    write_series(
        &out.join("data.csv"),
        &Series {
            y: Some((&data.y, Some(&data.mask))),
            ..Series::default()
        },
    )?;
    if let Some(r) = &rho {
        write_series(
            &out.join("rho.csv"),
            &Series {
                rho: Some(r),
                ..Series::default()
            },
        )?;
    }
    write_json(
        &out.join("meta.json"),
        &json!({
            "generator": name,
            "T": t_len,
            "seed": seed,
            "mask": mask.map(|(a, b)| [a, b]),
            "emission": family_name(data.family),
            "N": data.dim(),
        }),
    )
}

fn read_meta(dir: &Path) -> Option<Value> {
    let p = dir.join("meta.json");
    p.exists().then(|| read_json_file(&p).ok()).flatten()
}

#[allow(clippy::too_many_arguments)]
fn run_fit(
    data_path: &Path,
    model: &str,
    inference: &str,
    (k, m): (usize, usize),
    t_check: Option<usize>,
    seed: u64,
    mask: Option<&str>,
    (iters, chains, thin): (usize, usize, usize),
    family: Option<Family>,
    prior: Prior,
    out: &Path,
) -> Result<()> {
    let variant = VariantTag::from_name(model)?;
    let inference = Inference::from_name(inference)?;
    let family = match family {
        Some(f) => f.into(),
        None => match data_path
            .parent()
            .and_then(read_meta)
            .and_then(|m| m["emission"].as_str().map(String::from))
        {
            Some(s) if s == "bernoulli" => EmissionFamily::Bernoulli,
            _ => EmissionFamily::Gaussian,
        },
    };
    let mut data: Dataset = read_dataset(data_path, family)?;
    if let Some(t) = t_check {
        if t != data.len() {
            return Err(Error::InvalidParameter(format!(
                "--T {t} but the data has {} steps",
                data.len()
            )));
        }
    }
    if let Some(s) = mask {
        let (a, b) = parse_mask(s, data.len())?;
        data.mask_interval(a, b)?;
    }
    let mut cfg = FitConfig::new(variant, k, m, data.dim(), inference, iters, seed)?;
    cfg.chains = chains;
    cfg.thinning = thin;
    if let Prior::Nascar = prior {
        let mut h = Hypers::default_for(m, data.dim())?;
        h.dynamics = rslds::distributions::MniwParams::new(
            h.dynamics.m0.clone(),
            nalgebra::DMatrix::identity(m + 1, m + 1),
            h.dynamics.s0.clone(),
            h.dynamics.n0,
        )?;
        cfg.hypers = h;
    }
    let result = fit(&data, &cfg)?;
    ensure_dir(out)?;
    write_json(&out.join("init.json"), &result.init.to_json())?;
    for (c, ch) in result.chains.iter().enumerate() {
        match inference {
            Inference::Gibbs => {
                let mut text = String::new();
                for s in &ch.samples {
                    text.push_str(&serde_json::to_string(s).map_err(|e| Error::Json {
                        context: "trace record".into(),
                        source: e,
                    })?);
                    text.push('\n');
                }
                write_text(&out.join(format!("trace_chain{c}.jsonl")), &text)?;
            }
            Inference::Svi => {
                let mut text = String::from(ElboRecord::CSV_HEADER);
                text.push('\n');
                for r in &ch.elbo {
                    text.push_str(&r.csv_line());
                    text.push('\n');
                }
                write_text(&out.join("elbo.csv"), &text)?;
            }
        }
        write_json(&out.join(format!("params_chain{c}.json")), &ch.params.to_json())?;
        write_series(
            &out.join(format!("path_chain{c}.csv")),
            &Series {
                z: Some(&ch.path.z),
                z_mode: Some(&ch.z_mode),
                x: Some(&ch.path.x),
                ..Series::default()
            },
        )?;
        if let Some(r) = &ch.rho {
            write_series(
                &out.join(format!("rho_chain{c}.csv")),
                &Series {
                    rho: Some(r),
                    ..Series::default()
                },
            )?;
        }
    }
    write_json(
        &out.join("fit.json"),
        &json!({
            "model": variant.name(),
            "inference": inference.name(),
            "K": k,
            "M": m,
            "N": data.dim(),
            "T": data.len(),
            "iters": iters,
            "chains": result.chains.len(),
            "seed": seed,
            "chain_seeds": result.chains.iter().map(|c| c.seed).collect::<Vec<_>>(),
            "emission": family_name(family),
            "masked_steps": data.mask.iter().filter(|o| !**o).count(),
        }),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn chain_files(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    (0..)
        .map(|c| dir.join(format!("{prefix}{c}.csv")))
        .take_while(|p| p.exists())
        .collect()
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn duration_json(z: &[usize]) -> Value {
    let k = z.iter().max().map_or(0, |m| m + 1);
    let (pooled, _) = duration_summary(z, k);
    json!({
        "count": pooled.count,
        "mean": finite_or_null(pooled.mean),
        "cv": finite_or_null(pooled.cv),
        "geometric_cv": finite_or_null(geometric_cv(pooled.mean)),
    })
}

fn evaluate(fit_dir: &Path, truth_dir: &Path, generated: Option<&Path>, mask: Option<&str>, out: &Path) -> Result<()> {
    let truth = read_series(&truth_dir.join("truth.csv"))?;
    let tz = truth
        .z
        .as_ref()
        .ok_or_else(|| Error::Data("truth.csv has no z column".into()))?;
    let tx = truth
        .x
        .as_ref()
        .ok_or_else(|| Error::Data("truth.csv has no x columns".into()))?;
    let t_len = tz.len();
    let mask = match mask {
        Some(s) => Some(parse_mask(s, t_len)?),
        None => read_meta(truth_dir).and_then(|m| {
            let a = m["mask"][0].as_u64()? as usize;
            let b = m["mask"][1].as_u64()? as usize;
            Some((a, b))
        }),
    };
    let inside: Vec<usize> = mask.map_or(Vec::new(), |(a, b)| (a..b).collect());
    let outside: Vec<usize> = (0..t_len).filter(|t| !inside.contains(t)).collect();

    // a fit directory has path_chain*.csv; any other run directory is read from truth.csv
    let mut paths = chain_files(fit_dir, "path_chain");
    if paths.is_empty() {
        paths.push(fit_dir.join("truth.csv"));
    }
    let mut chains = Vec::new();
    let mut accs = Vec::new();
    for p in &paths {
        let s = read_series(p)?;
        let z = s
            .z_mode
            .or(s.z)
            .ok_or_else(|| Error::Data(format!("{}: no z column", p.display())))?;
        let x =
            s.x.ok_or_else(|| Error::Data(format!("{}: no x columns", p.display())))?;
        if z.len() != t_len || x.len() != t_len {
            return Err(Error::Dimension(format!(
                "{} has {} steps, truth has {t_len}",
                p.display(),
                z.len()
            )));
        }
        let acc = segmentation_accuracy(tz, &z, Some(&outside))?;
        accs.push(acc);
        chains.push(json!({
            "file": p.file_name().map(|f| f.to_string_lossy().to_string()),
            "accuracy": acc,
            "affine_recovery_rmse": affine_recovery_error(&x, tx)?,
        }));
    }

    let mut rho_files = chain_files(fit_dir, "rho_chain");
    if rho_files.is_empty() && fit_dir.join("rho.csv").exists() {
        rho_files.push(fit_dir.join("rho.csv"));
    }
    let true_rho = truth_dir.join("rho.csv");
    let calibration = if !rho_files.is_empty() && true_rho.exists() {
        let truth_rho = read_series(&true_rho)?.rho.unwrap_or_default();
        let mut pooled: Option<Vec<DVector<f64>>> = None;
        for f in &rho_files {
            let r = read_series(f)?.rho.unwrap_or_default();
            match &mut pooled {
                None => pooled = Some(r),
                Some(acc) => acc.iter_mut().zip(&r).for_each(|(a, v)| *a += v),
            }
        }
        let pooled: Vec<DVector<f64>> = pooled
            .unwrap_or_default()
            .into_iter()
            .map(|a| a / rho_files.len() as f64)
            .collect();
        if pooled.len() != t_len || truth_rho.len() != t_len {
            return Err(Error::Dimension(
                "event probability files do not match the truth length".into(),
            ));
        }
        let idx = if inside.is_empty() { &outside } else { &inside };
        json!({
            "output": 1,
            "region": if inside.is_empty() { "all" } else { "masked" },
            "mean_abs_error": calibration_error(&pooled, &truth_rho, 0, idx),
        })
    } else {
        Value::Null
    };

    let durations = json!({
        "truth": duration_json(tz),
        "generated": match generated {
            Some(g) => {
                let s = read_series(&g.join("truth.csv"))?;
                duration_json(&s.z.ok_or_else(|| Error::Data("generated run has no z column".into()))?)
            }
            None => Value::Null,
        },
    });

    ensure_dir(out.parent().unwrap_or(Path::new(".")))?;
    write_json(
        out,
        &json!({
            "T": t_len,
            "mask": mask.map(|(a, b)| [a, b]),
            "accuracy_median": median(accs),
            "chains": chains,
            "calibration": calibration,
            "durations": durations,
        }),
    )
}

fn generate(params_path: &Path, t_len: usize, seed: u64, out: &Path) -> Result<()> {
    let params = ModelParams::from_json(&read_json_file(params_path)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (path, data) = simulate(&params, t_len, None, &mut rng)?;
    ensure_dir(out)?;
    write_series(
        &out.join("truth.csv"),
        &Series {
            z: Some(&path.z),
            x: Some(&path.x),
            y: Some((&data.y, None)),
            ..Series::default()
        },
    )?;
    write_json(
        &out.join("meta.json"),
        &json!({
            "generator": "from-model-file",
            "params": params_path.display().to_string(),
            "T": t_len,
            "seed": seed,
            "mask": Value::Null,
            "emission": family_name(data.family),
            "N": data.dim(),
        }),
    )
}

fn geweke(
    model: &str,
    k: usize,
    t_len: usize,
    seed: u64,
    samples: usize,
    thin: Option<usize>,
    out: &Path,
) -> Result<bool> {
    let mut cfg = GewekeConfig::small(seed)?;
    cfg.variant = VariantTag::from_name(model)?;
    if cfg.variant.strategy().observes_x() {
        return Err(Error::InvalidParameter(
            "the Geweke harness needs a model with separate emissions".into(),
        ));
    }
    cfg.k = k;
    cfg.t_len = t_len;
    cfg.samples = samples;
    if let Some(t) = thin {
        cfg.thin = t;
    }
    let report = run_geweke(&cfg)?;
    let pass = report.max_ks() < 0.05;
    ensure_dir(out)?;
    write_json(
        &out.join("geweke.json"),
        &json!({
            "model": cfg.variant.name(),
            "K": k,
            "T": t_len,
            "seed": seed,
            "report": serde_json::to_value(&report).map_err(|e| Error::Json { context: "geweke report".into(), source: e })?,
            "max_ks": report.max_ks(),
            "pass": pass,
        }),
    )?;
    for p in &report.probes {
        println!("{:<20} ks={:.4}", p.name, p.ks);
    }
    println!("max KS {:.4}: {}", report.max_ks(), if pass { "pass" } else { "fail" });
    Ok(pass)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenerateData {
            generator,
            model,
            k,
            m,
            n,
            t,
            seed,
            mask,
            emission,
            out,
        } => {
            let family = match generator {
                Generator::LorenzBernoulli => EmissionFamily::Bernoulli,
                Generator::Nascar => EmissionFamily::Gaussian,
                Generator::Prior => emission.into(),
            };
            generate_data(generator, &model, (k, m, n), t, seed, mask.as_deref(), family, &out)
        }
        Cmd::Fit {
            data,
            model,
            inference,
            k,
            m,
            t,
            seed,
            mask,
            iters,
            chains,
            thin,
            emission,
            prior,
            out,
        } => run_fit(
            &data,
            &model,
            &inference,
            (k, m),
            t,
            seed,
            mask.as_deref(),
            (iters, chains, thin),
            emission,
            prior,
            &out,
        ),
        Cmd::Evaluate {
            fit,
            truth,
            generated,
            mask,
            out,
        } => evaluate(&fit, &truth, generated.as_deref(), mask.as_deref(), &out),
        Cmd::Generate { params, t, seed, out } => generate(&params, t, seed, &out),
        Cmd::GewekeTest {
            model,
            k,
            t,
            seed,
            iters,
            thin,
            out,
        } => geweke(&model, k, t, seed, iters, thin, &out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
