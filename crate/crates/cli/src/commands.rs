use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use ckn_core::data::{self, Dataset, Split, DATA_ROOT_ENV};
use ckn_core::domain::{PatchShape, PoolingFilter};
use ckn_core::dpk::DotProductKernel;
use ckn_core::featoracle::e_pq_apply;
use ckn_core::gram::{self, compute_gram, cross_gram, GramOptions};
use ckn_core::krr::{self, KrrModel, TargetCoding};
use ckn_core::theory::{self, ExperimentConfig, GSpec, SyntheticTask, TwoLayerMoments};
use ckn_core::{suites, ArchSpec, GramMatrix};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::config::{RunConfig, Source, Whitening};
use crate::{
    Cli, Command, CurveArgs, DataCmd, EpqInput, FigureCmd, FilterArg, GramCmd, KrrCmd, PredictArgs, RunSource, Suite,
    TheoryCmd, VerifyArgs,
};

/// Returns `Ok(false)` when a check ran but failed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Command::Data(c) => data_cmd(cli, c),
        Command::Gram(c) => gram_cmd(cli, c),
        Command::Krr(c) => krr_cmd(cli, c),
        Command::Theory(c) => theory_cmd(cli, c),
        Command::Verify(a) => verify_cmd(cli, a),
        Command::Figures(c) => figures_cmd(cli, c),
        Command::Pipeline(s) => pipeline(cli, s),
    }
}

fn out_file(cli: &Cli, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(cli.out.join(name))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn load_run_config(cli: &Cli, src: &RunSource) -> Result<RunConfig> {
    let mut cfg = match (&src.config, &src.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::for_preset(name, src.train, src.test)?,
        (None, None) => bail!("pass --config FILE or --preset NAME"),
    };
    if cli.seed != 0 {
        cfg.seed = cli.seed;
    }
    if cli.threads != 0 {
        cfg.threads = Some(cli.threads);
    }
    Ok(cfg)
}

fn workers(cfg: &RunConfig) -> usize {
    cfg.threads.unwrap_or(0)
}

/// Target used to label product-of-spheres data.
fn sphere_task(omega: usize, d: usize, seed: u64) -> Result<SyntheticTask> {
    let k = DotProductKernel::Exponential { sigma: 0.6 };
    let g = GSpec::random(k, d, theory::DEFAULT_TERMS, seed ^ 0x7461_7267, true)?;
    Ok(SyntheticTask { omega, d, g, tau: 0.0 })
}

fn sphere_dataset(task: &SyntheticTask, n: usize, seed: u64) -> Result<Dataset> {
    let ds = data::gen_product_of_spheres(task.omega, task.d, n, seed)?;
    let labels = ds
        .signals()
        .iter()
        .map(|x| task.f_star(x).map(|f| usize::from(f > 0.0)))
        .collect::<ckn_core::Result<Vec<_>>>()?;
    Ok(Dataset::new(ds.signals().to_vec(), Some(labels), &format!("{}|sign-labels", ds.provenance()))?)
}

fn cifar_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let root = match &cfg.data.root {
        Some(r) => r.clone(),
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .with_context(|| format!("CIFAR data needs data.root or {DATA_ROOT_ENV}"))?,
    };
    [root.join("cifar-10-batches-bin"), root.clone()]
        .into_iter()
        .find(|d| data::cifar_files(d, Split::Train)[0].exists())
        .with_context(|| format!("no CIFAR-10 binary batches under {}", root.display()))
}

/// Crops to the architecture's input, whitens with statistics of the
/// training split, and adopts the architecture's boundary mode.
fn prepare(cfg: &RunConfig, arch: &ArchSpec) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.data.source {
        Source::Spheres => {
            let (omega, d) = (cfg.data.omega.unwrap(), cfg.data.d.unwrap());
            let task = sphere_task(omega, d, cfg.seed)?;
            let s = cfg.seed.wrapping_mul(2);
            return Ok((sphere_dataset(&task, cfg.data.train, s + 1)?, sphere_dataset(&task, cfg.data.test, s + 2)?));
        }
        Source::Cifar => {
            let dir = cifar_dir(cfg)?;
            let train = data::load_cifar10(&dir, Split::Train, Some(cfg.data.train))?;
            let test = data::load_cifar10(&dir, Split::Test, Some(cfg.data.test))?;
            ensure!(train.len() == cfg.data.train, "only {} training images available", train.len());
            let side = arch.input_grid().extents()[0];
            (data::center_crop(&train, side, side)?, data::center_crop(&test, side, side)?)
        }
    };
    let zca = match cfg.data.whitening {
        Whitening::None => None,
        Whitening::Global => Some(data::fit_zca(&train, None, None)?),
        Whitening::Local => {
            let p = cfg.whiten_side()?;
            Some(data::fit_zca(&train, Some(&PatchShape::centered(2, p)?), None)?)
        }
    };
    let boundary = arch.input_grid().boundary();
    let finish = |ds: Dataset| -> Result<Dataset> {
        let ds = match &zca {
            Some(t) => data::apply_zca(&ds, t)?,
            None => ds,
        };
        let signals = ds.signals().iter().map(|s| s.clone().with_grid_boundary(boundary)).collect();
        let tag = format!("{}|boundary={boundary:?}", ds.provenance());
        Ok(Dataset::new(signals, ds.labels().map(<[usize]>::to_vec), &tag)?)
    };
    Ok((finish(train)?, finish(test)?))
}

fn data_cmd(cli: &Cli, c: &DataCmd) -> Result<bool> {
    match c {
        DataCmd::Prep(src) => {
            let cfg = load_run_config(cli, src)?;
            let arch = cfg.validate()?;
            let (train, test) = prepare(&cfg, &arch)?;
            train.save(&out_file(cli, "train.ckd")?)?;
            test.save(&out_file(cli, "test.ckd")?)?;
            print_json(&json!({
                "train": train.len(),
                "test": test.len(),
                "train_fingerprint": format!("{:016x}", train.fingerprint()),
                "test_fingerprint": format!("{:016x}", test.fingerprint()),
            }));
        }
        DataCmd::Gen { omega, d, n, output } => {
            let task = sphere_task(*omega, *d, cli.seed)?;
            let ds = sphere_dataset(&task, *n, cli.seed.wrapping_mul(2) + 1)?;
            ds.save(output)?;
            print_json(&json!({ "n": ds.len(), "fingerprint": format!("{:016x}", ds.fingerprint()) }));
        }
    }
    Ok(true)
}

fn load_gram(path: &Path) -> Result<GramMatrix> {
    GramMatrix::load(path).with_context(|| format!("loading {}", path.display()))
}

fn decay_csv(g: &GramMatrix, top: usize) -> Result<String> {
    let ev = gram::eigen_decay(g, top)?;
    let tr = g.trace();
    let mut s = String::from("rank,eigenvalue,normalized\n");
    for (i, v) in ev.iter().enumerate() {
        writeln!(s, "{},{v:.10e},{:.10e}", i + 1, v / tr)?;
    }
    Ok(s)
}

fn gram_cmd(cli: &Cli, c: &GramCmd) -> Result<bool> {
    match c {
        GramCmd::Compute { source, data, output, tile, stop_after } => {
            let cfg = load_run_config(cli, source)?;
            let arch = cfg.arch.build()?;
            let ds = Dataset::load(data)?;
            let opts = GramOptions {
                tile: tile.or(cfg.tile).unwrap_or(gram::DEFAULT_TILE),
                workers: workers(&cfg),
                path: Some(output.clone()),
                stop_after: *stop_after,
            };
            let t = Instant::now();
            let (g, stats) = compute_gram(&arch, ds.signals(), ds.fingerprint(), &opts)?;
            print_json(&json!({
                "n": g.n(),
                "tiles_total": stats.tiles_total,
                "tiles_computed": stats.tiles_computed,
                "tiles_reused": stats.tiles_reused,
                "self_maps": stats.self_maps,
                "cross_maps": stats.cross_maps,
                "seconds": t.elapsed().as_secs_f64(),
            }));
        }
        GramCmd::Eig { gram, top } => {
            let csv = decay_csv(&load_gram(gram)?, *top)?;
            fs::write(out_file(cli, "eigenvalues.csv")?, &csv)?;
            print!("{csv}");
        }
        GramCmd::Verify { gram } => {
            let r = gram::verify_file(gram)?;
            let ok = r.pending == 0 && r.bad_checksums == 0;
            print_json(&json!({
                "n": r.header.n,
                "tile": r.header.tile,
                "tiles": r.tiles,
                "done": r.done,
                "pending": r.pending,
                "bad_checksums": r.bad_checksums,
                "complete": ok,
            }));
            return Ok(ok);
        }
    }
    Ok(true)
}

fn classes_of(ds: &Dataset) -> Result<(Vec<usize>, usize)> {
    let labels = ds.labels().context("dataset has no labels")?.to_vec();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok((labels, classes))
}

struct Scored {
    scores: DMatrix<f64>,
    predicted: Vec<usize>,
}

fn score(cfg: &RunConfig, model: &KrrModel, train: &Dataset, test: &Dataset) -> Result<Scored> {
    let arch = cfg.arch.build()?;
    let cross = cross_gram(&arch, train.signals(), test.signals(), train.fingerprint(), workers(cfg))?;
    let scores = model.predict(&cross)?;
    let predicted = krr::classify(&scores);
    Ok(Scored { scores, predicted })
}

fn metrics(predicted: &[usize], labels: &[usize], classes: usize) -> Value {
    json!({
        "accuracy": krr::accuracy(predicted, labels),
        "per_class_accuracy": krr::per_class_accuracy(predicted, labels, classes),
    })
}

fn krr_cmd(cli: &Cli, c: &KrrCmd) -> Result<bool> {
    match c {
        KrrCmd::Fit { gram, data, lambda, output } => {
            let g = load_gram(gram)?;
            let ds = Dataset::load(data)?;
            ensure!(
                g.data_fingerprint() == ds.fingerprint(),
                "Gram file was computed on a different dataset"
            );
            let (labels, classes) = classes_of(&ds)?;
            let model = krr::fit_onevsall(&g, &labels, classes, *lambda, TargetCoding::default())?;
            model.save(output)?;
            let train_pred = krr::classify(&model.fitted(&g)?);
            print_json(&json!({
                "n": g.n(),
                "classes": classes,
                "lambda": lambda,
                "jitter": model.jitter,
                "train_accuracy": krr::accuracy(&train_pred, &labels),
            }));
        }
        KrrCmd::Predict(a) | KrrCmd::Eval(a) => {
            let PredictArgs { source, model, train_data: train, test_data: test } = a;
            let cfg = load_run_config(cli, source)?;
            let model = KrrModel::load(model)?;
            let (train, test) = (Dataset::load(train)?, Dataset::load(test)?);
            let s = score(&cfg, &model, &train, &test)?;
            if matches!(c, KrrCmd::Predict(_)) {
                let mut csv = String::from("index,predicted");
                for j in 0..s.scores.ncols() {
                    write!(csv, ",score{j}")?;
                }
                csv.push('\n');
                for (i, row) in s.scores.row_iter().enumerate() {
                    write!(csv, "{i},{}", s.predicted[i])?;
                    for v in row.iter() {
                        write!(csv, ",{v:.8e}")?;
                    }
                    csv.push('\n');
                }
                fs::write(out_file(cli, "predictions.csv")?, &csv)?;
                print!("{csv}");
            } else {
                let (labels, classes) = classes_of(&test)?;
                let m = metrics(&s.predicted, &labels, classes.max(s.scores.ncols()));
                write_json(&out_file(cli, "eval.json")?, &m)?;
                print_json(&m);
            }
        }
    }
    Ok(true)
}

fn experiment_config(a: &CurveArgs) -> ExperimentConfig {
    ExperimentConfig {
        n_grid: a.n_grid.clone(),
        seeds: (0..a.seeds).collect(),
        test_size: a.test,
        ..ExperimentConfig::default()
    }
}

fn curves(cli: &Cli, a: &CurveArgs) -> Result<bool> {
    let cfg = experiment_config(a);
    let k = DotProductKernel::Exponential { sigma: 0.6 };
    let mut out = Vec::new();
    let mut all_better = true;
    for &omega in &a.omega {
        let (c, ratio) = theory::pooling_gain_experiment(omega, 3, &k, a.tau, cli.seed + omega as u64, &cfg)?;
        theory::write_curves_csv(&out_file(cli, &format!("curves_omega{omega}.csv"))?, &c)?;
        let pooled = c.means("global");
        let plain = c.means("none");
        let better = pooled.iter().zip(&plain).all(|(p, q)| p.1 < q.1);
        all_better &= better;
        out.push(json!({
            "omega": omega,
            "matched_error_ratio": ratio,
            "pooling_better_everywhere": better,
            "global": pooled,
            "none": plain,
            "slope_global": theory::rate_slope(&pooled),
            "slope_none": theory::rate_slope(&plain),
        }));
    }
    let ratios: Vec<f64> = out.iter().map(|v| v["matched_error_ratio"].as_f64().unwrap()).collect();
    let monotone = ratios.windows(2).all(|w| w[1] > w[0]);
    let v = json!({ "curves": out, "ratios_increasing": monotone, "pass": monotone && all_better });
    write_json(&out_file(cli, "curves.json")?, &v)?;
    print_json(&v);
    Ok(monotone && all_better)
}

fn theory_cmd(cli: &Cli, c: &TheoryCmd) -> Result<bool> {
    match c {
        TheoryCmd::Spectrum { omega, d, sigma, filter, s, kmax, top } => {
            let k = DotProductKernel::exponential(*sigma)?;
            let h = match filter {
                FilterArg::Dirac => PoolingFilter::dirac(1, 1)?,
                FilterArg::Average => PoolingFilter::average(*omega, 1, 1)?,
                FilterArg::Gaussian => PoolingFilter::gaussian(*s, 1)?.with_stride(1)?,
            };
            let spec = theory::predict_spectrum(&k, *d, *omega, &h, *kmax)?;
            if let Some(w) = &spec.warning {
                eprintln!("warning: {w}");
            }
            let mut csv = format!("# E[K(x,x)] = {:.10e}\nrank,eigenvalue,w,k\n", spec.trace());
            for (i, (v, w, deg)) in spec.labelled(*top).into_iter().enumerate() {
                let w = w.map_or("-".to_string(), |w| w.to_string());
                writeln!(csv, "{},{v:.10e},{w},{deg}", i + 1)?;
            }
            fs::write(out_file(cli, "predicted_spectrum.csv")?, &csv)?;
            print!("{csv}");
        }
        TheoryCmd::Bounds { omega, n, eps } => {
            let k = DotProductKernel::Exponential { sigma: 0.6 };
            let eps = match eps {
                Some(e) => *e,
                None => TwoLayerMoments::new(&k, 3)?.bound_eps(),
            };
            let mut rows = Vec::new();
            for &o in omega {
                rows.extend(theory::check_two_layer_table(&k, 3, o, eps, *n, cli.seed + o as u64)?);
            }
            theory::write_bounds_csv(&out_file(cli, "bounds.csv")?, &rows)?;
            let ok = rows.iter().all(|r| r.holds() && r.symbolic_matches());
            print_json(&json!({ "eps": eps, "rows": rows, "pass": ok }));
            return Ok(ok);
        }
        TheoryCmd::Curves(a) => return curves(cli, a),
    }
    Ok(true)
}

fn verify_cmd(cli: &Cli, a: &VerifyArgs) -> Result<bool> {
    let report = match a.suite {
        Suite::Oracle => suites::oracle_suite(a.count, cli.seed, a.inject_fault)?,
        Suite::Norms => suites::norms_suite(cli.seed)?,
        Suite::Spectrum => {
            let (r, checks) = suites::spectrum_suite(a.n.unwrap_or(3000), cli.seed)?;
            theory::write_spectrum_csv(&out_file(cli, "spectrum.csv")?, &checks)?;
            r
        }
        Suite::Bounds => {
            let (r, rows) = suites::bounds_suite(a.n.unwrap_or(2000), cli.seed, &[4, 8])?;
            theory::write_bounds_csv(&out_file(cli, "bounds.csv")?, &rows)?;
            r
        }
    };
    let v = serde_json::to_value(&report)?;
    write_json(&out_file(cli, &format!("verify_{}.json", report.suite))?, &v)?;
    print_json(&v);
    Ok(report.pass)
}

fn figures_cmd(cli: &Cli, c: &FigureCmd) -> Result<bool> {
    match c {
        FigureCmd::Epq { p, q, omega, s, input, at } => {
            let h = PoolingFilter::gaussian(*s, 1)?.with_stride(1)?;
            let mut x = vec![0.0; *omega];
            match input {
                EpqInput::Dirac => {
                    ensure!(at < omega, "--at must be below --omega");
                    x[*at] = 1.0;
                }
                EpqInput::Constant => x.iter_mut().for_each(|v| *v = 1.0),
            }
            let out = e_pq_apply(&h, *p, *q, &x)?;
            let mut csv = String::from("u,v,value\n");
            let mut nonzero = 0;
            for u in 0..*omega {
                for v in 0..*omega {
                    let val = out[u * omega + v];
                    nonzero += usize::from(val != 0.0);
                    writeln!(csv, "{u},{v},{val:.10e}")?;
                }
            }
            let path = out_file(cli, "epq.csv")?;
            fs::write(&path, csv)?;
            print_json(&json!({ "nonzero": nonzero, "csv": path }));
        }
        FigureCmd::Decay { gram, top } => {
            let csv = decay_csv(&load_gram(gram)?, *top)?;
            fs::write(out_file(cli, "decay.csv")?, &csv)?;
            print!("{csv}");
        }
        FigureCmd::Curves(a) => return curves(cli, a),
    }
    Ok(true)
}

fn pipeline(cli: &Cli, src: &RunSource) -> Result<bool> {
    let mut cfg = load_run_config(cli, src)?;
    if cli.out != Path::new(".") || cfg.out_dir.is_none() {
        cfg.out_dir = Some(cli.out.clone());
    }
    let dir = cfg.out_dir.clone().unwrap();
    let arch = cfg.validate().context("config validation")?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let t = Instant::now();
    let (train, test) = prepare(&cfg, &arch).context("data preparation")?;
    let t_prep = t.elapsed().as_secs_f64();
    train.save(&dir.join("train.ckd"))?;
    test.save(&dir.join("test.ckd"))?;

    let t = Instant::now();
    let opts = GramOptions {
        tile: cfg.tile.unwrap_or(gram::DEFAULT_TILE),
        workers: workers(&cfg),
        path: Some(dir.join("train.ckg")),
        stop_after: None,
    };
    let (g, stats) = compute_gram(&arch, train.signals(), train.fingerprint(), &opts).context("gram")?;
    let t_gram = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (labels, classes) = classes_of(&train)?;
    let classes = if cfg.data.source == Source::Cifar { data::CIFAR_CLASSES } else { classes };
    let model = krr::fit_onevsall(&g, &labels, classes, cfg.lambda, TargetCoding::default()).context("krr fit")?;
    model.save(&dir.join("model.krr"))?;
    let t_fit = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let s = score(&cfg, &model, &train, &test).context("evaluation")?;
    let t_eval = t.elapsed().as_secs_f64();
    let (test_labels, _) = classes_of(&test)?;
    let mut m = metrics(&s.predicted, &test_labels, classes);
    let obj = m.as_object_mut().unwrap();
    obj.insert("n_train".into(), json!(train.len()));
    obj.insert("n_test".into(), json!(test.len()));
    obj.insert("classes".into(), json!(classes));
    obj.insert("lambda".into(), json!(cfg.lambda));
    obj.insert("jitter".into(), json!(model.jitter));
    obj.insert("preset".into(), json!(cfg.arch.preset));
    obj.insert("arch_fingerprint".into(), json!(format!("{:016x}", arch.fingerprint())));
    obj.insert("train_fingerprint".into(), json!(format!("{:016x}", train.fingerprint())));
    obj.insert("gram_tiles_reused".into(), json!(stats.tiles_reused));
    obj.insert(
        "timings".into(),
        json!({ "prep": t_prep, "gram": t_gram, "fit": t_fit, "eval": t_eval }),
    );
    write_json(&dir.join("metrics.json"), &m)?;
    print_json(&m);
    Ok(true)
}
