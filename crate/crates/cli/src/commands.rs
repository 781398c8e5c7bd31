use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use serde_json::json;

use otmil::baselines::{pool_baseline_train, BaselineConfig, PoolKind};
use otmil::data::{
    build_hard_bags, build_normal_bags, load_csv, load_idx_mnist, load_ndjson, save_ndjson,
    Dataset, GaussianBlobs, GenConfig, InstancePool, InstanceSource, Scheme,
};
use otmil::eval::{entropy_curve, evaluate, write_entropy_csv, BagInference};
use otmil::labeling::{LocalConstraintSource, MuSchedule, SinkhornConfig};
use otmil::model::{Arch, ClassifierParams, SgdConfig};
use otmil::numkit::Rng;
use otmil::trainer::{run_ablation_suite, self_train_with_eval, Ablation, TrainConfig};

use crate::args::{
    AblationArgs, ArchArg, BaselineArgs, Cli, EntropyArgs, EvalArgs, GenArgs, Global, InferenceArg,
    LocalArg, PoolArg, SchemeArg, SweepArgs, TrainArgs, TrainFlags,
};

/// Pseudo-label positive fraction below which a run counts as collapsed.
const DEGENERATE_FRACTION: f64 = 0.01;

pub fn prepare_out(cli: &Cli) -> Result<()> {
    let out = &cli.global.out;
    fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    write_json(&out.join("config.json"), cli)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let loaded = if is_csv {
        load_csv(path)
    } else {
        load_ndjson(path)
    };
    loaded.with_context(|| format!("loading dataset {}", path.display()))
}

fn load_eval(train: &Dataset, eval: Option<&PathBuf>) -> Result<Option<Dataset>> {
    let Some(path) = eval else { return Ok(None) };
    let ds = load_dataset(path)?;
    ensure!(
        ds.feature_dim == train.feature_dim,
        "evaluation data has {} features, training data {}",
        ds.feature_dim,
        train.feature_dim
    );
    Ok(Some(ds))
}

fn arch(kind: ArchArg, hidden: usize) -> Arch {
    match kind {
        ArchArg::Linear => Arch::Linear,
        ArchArg::Mlp => Arch::Mlp { hidden },
    }
}

fn inference(arg: InferenceArg) -> BagInference {
    match arg {
        InferenceArg::Max => BagInference::Max,
        InferenceArg::Mean => BagInference::Mean,
    }
}

/// Init uses `seed`, batch shuffling `seed + 1`.
fn train_config(flags: &TrainFlags, seed: u64) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        arch: arch(flags.arch, flags.hidden),
        sgd: SgdConfig {
            learning_rate: flags.lr,
            batch_size: flags.batch_size,
            epochs: flags.epochs,
            seed: seed.wrapping_add(1),
        },
        sinkhorn: SinkhornConfig {
            lambda: flags.lambda,
            max_iters: flags.sinkhorn_iters,
            marginal_tol: flags.tol,
            ..SinkhornConfig::default()
        },
        schedule: MuSchedule {
            mu_final: flags.mu,
            warmup: flags.warmup_t,
        },
        reassign_every: flags.reassign_every,
        ablation: Ablation {
            soft_labels: !flags.hard_labels,
            constrain: !flags.no_constrain,
            adaptive_mu: !flags.no_adaptive_mu,
        },
        local_constraint: match flags.local_on {
            LocalArg::Assignment => LocalConstraintSource::Assignment,
            LocalArg::Prediction => LocalConstraintSource::Prediction,
        },
        bag_inference: inference(flags.bag_inference),
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn gen_config(g: &Global, a: &GenArgs) -> Result<GenConfig> {
    let mut cfg = match a.scheme {
        SchemeArg::Normal => GenConfig::normal(a.ratio, a.bags, g.seed),
        SchemeArg::Hard => GenConfig {
            positive_ratio: a.ratio,
            ..GenConfig::hard(a.bags, g.seed)
        },
    };
    cfg.n_test_bags = a.test_bags;
    cfg.bag_size = a.bag_size;
    cfg.feature_dim = a.dim;
    cfg.noise_std = a.noise_std;
    if let Some(s) = a.separation {
        cfg.cluster_separation = s;
    }
    if let Some(s) = a.second_separation {
        cfg.second_concept_separation = s;
    }
    if let Some(p) = a.first_concept_prob {
        cfg.first_concept_prob = p;
    }
    cfg.validate()?;
    ensure!(a.bags >= 2, "need at least 2 training bags, got {}", a.bags);
    ensure!(
        a.test_bags >= 2,
        "need at least 2 bags per test split, got {}",
        a.test_bags
    );
    Ok(cfg)
}

fn mnist_pool(images: &Path, labels: &Path, scheme: Scheme, rng: &mut Rng) -> Result<InstancePool> {
    let (features, digits) = load_idx_mnist(images, labels)
        .with_context(|| format!("reading MNIST {}", images.display()))?;
    Ok(InstancePool::mnist(&features, &digits, scheme, rng))
}

pub fn cmd_gen(g: &Global, a: &GenArgs) -> Result<()> {
    let cfg = gen_config(g, a)?;
    let mut rng = Rng::new(g.seed);
    let (mut train_src, mut test_src): (Box<dyn InstanceSource>, Box<dyn InstanceSource>) = match (
        &a.mnist_train_images,
        &a.mnist_train_labels,
        &a.mnist_test_images,
        &a.mnist_test_labels,
    ) {
        (Some(ti), Some(tl), Some(vi), Some(vl)) => (
            Box::new(mnist_pool(ti, tl, cfg.scheme, &mut rng)?),
            Box::new(mnist_pool(vi, vl, cfg.scheme, &mut rng)?),
        ),
        (None, None, None, None) => {
            let blobs = GaussianBlobs::from_config(&cfg);
            (Box::new(blobs.clone()), Box::new(blobs))
        }
        _ => bail!("MNIST input needs all four of --mnist-{{train,test}}-{{images,labels}}"),
    };
    let source = if a.mnist_train_images.is_some() {
        "mnist"
    } else {
        "blobs"
    };

    let splits: Vec<Dataset> = match cfg.scheme {
        Scheme::Normal => vec![
            build_normal_bags(
                "train",
                &cfg,
                Some(cfg.n_bags),
                train_src.as_mut(),
                &mut rng,
            )?,
            build_normal_bags(
                "test",
                &cfg,
                Some(cfg.n_test_bags),
                test_src.as_mut(),
                &mut rng,
            )?,
        ],
        Scheme::Hard => {
            let s = build_hard_bags(&cfg, train_src.as_mut(), test_src.as_mut(), &mut rng)?;
            vec![s.train, s.test_normal, s.test_pos0, s.test_pos8]
        }
    };
    let mut files = Vec::new();
    for ds in &splits {
        ensure!(
            ds.positive_bags().next().is_some() && ds.negative_bags().next().is_some(),
            "instance source ran out before split {} had both bag classes",
            ds.name
        );
        let file = format!("{}.ndjson", ds.name);
        save_ndjson(ds, g.out.join(&file))?;
        files.push(json!({ "file": file, "summary": ds.summary() }));
        println!(
            "wrote {} ({} bags)",
            g.out.join(&file).display(),
            ds.bags.len()
        );
    }
    write_json(
        &g.out.join("manifest.json"),
        &json!({
            "scheme": cfg.scheme,
            "source": source,
            "ratio": cfg.positive_ratio,
            "positives_per_bag": cfg.positives_per_bag(),
            "seed": g.seed,
            "config": cfg,
            "files": files,
        }),
    )
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

pub fn cmd_train(g: &Global, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(&a.train, g.seed)?;
    let train = load_dataset(&a.data)?;
    train.require_both_classes()?;
    let eval = load_eval(&train, a.eval.as_ref())?;
    let out = self_train_with_eval(&train, &cfg, eval.as_ref())?;

    out.params.save(g.out.join("checkpoint.json"))?;
    let mut csv = create(&g.out.join("metrics.csv"))?;
    out.record.write_csv(&mut csv)?;
    csv.flush()?;

    let last = out.record.last();
    let fraction = out.pseudo_labels.positive_fraction();
    let degenerate = fraction < DEGENERATE_FRACTION;
    write_json(
        &g.out.join("summary.json"),
        &json!({
            "seed": g.seed,
            "config": cfg,
            "train": train.summary(),
            "eval": eval.as_ref().map(Dataset::summary),
            "epochs": out.record.rows.len(),
            "instance_auc": last.and_then(|r| r.instance_auc),
            "bag_auc": last.and_then(|r| r.bag_auc),
            "pseudo_precision": last.and_then(|r| r.pseudo_precision),
            "pseudo_accuracy": last.and_then(|r| r.pseudo_accuracy),
            "final_positive_fraction": fraction,
            "degenerate": degenerate,
            "final": last,
        }),
    )?;
    match last.and_then(|r| r.instance_auc) {
        Some(auc) => println!("instance AUC {auc:.4}, positive pseudo fraction {fraction:.4}"),
        None => println!("positive pseudo fraction {fraction:.4}"),
    }
    if degenerate {
        println!("warning: pseudo labels collapsed to negative");
    }
    Ok(())
}

pub fn cmd_eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let params = ClassifierParams::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let data = load_dataset(&a.data)?;
    let metrics = evaluate(&params, &data, inference(a.bag_inference))?;
    write_json(
        &g.out.join("eval.json"),
        &json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "dataset": data.summary(),
            "metrics": metrics,
        }),
    )?;
    println!(
        "instance AUC {}, bag AUC {}, bag accuracy {:.4}",
        fmt_opt(metrics.instance_auc),
        fmt_opt(metrics.bag_auc),
        metrics.bag_accuracy
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    mu: f64,
    warmup_t: usize,
    seed: u64,
    instance_auc: Option<f64>,
    bag_auc: Option<f64>,
    bag_accuracy: f64,
    pseudo_precision: Option<f64>,
    pseudo_accuracy: Option<f64>,
    final_positive_fraction: f64,
}

fn sweep_point(train: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<SweepRow> {
    let out = self_train_with_eval(train, cfg, eval)?;
    let metrics = evaluate(&out.params, eval.unwrap_or(train), cfg.bag_inference)?;
    let last = out.record.last();
    Ok(SweepRow {
        mu: cfg.schedule.mu_final,
        warmup_t: cfg.schedule.warmup,
        seed: cfg.seed,
        instance_auc: metrics.instance_auc,
        bag_auc: metrics.bag_auc,
        bag_accuracy: metrics.bag_accuracy,
        pseudo_precision: last.and_then(|r| r.pseudo_precision),
        pseudo_accuracy: last.and_then(|r| r.pseudo_accuracy),
        final_positive_fraction: out.pseudo_labels.positive_fraction(),
    })
}

/// Runs `tasks` on at most `jobs` threads, keeping input order.
fn run_pool<T: Sync, R: Send>(tasks: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(task) = tasks.get(i) else { break };
                let r = f(task);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect()
}

pub fn cmd_sweep(g: &Global, a: &SweepArgs) -> Result<()> {
    if a.mu_grid.is_empty() || a.t_grid.is_empty() {
        bail!("empty sweep grid");
    }
    let base = train_config(&a.train, g.seed)?;
    let grid: Vec<TrainConfig> = a
        .mu_grid
        .iter()
        .flat_map(|&mu| a.t_grid.iter().map(move |&t| (mu, t)))
        .map(|(mu, warmup)| {
            let cfg = TrainConfig {
                schedule: MuSchedule {
                    mu_final: mu,
                    warmup,
                },
                ..base.clone()
            };
            cfg.validate().map(|()| cfg)
        })
        .collect::<otmil::Result<_>>()?;
    let train = load_dataset(&a.data)?;
    train.require_both_classes()?;
    let eval = load_eval(&train, a.eval.as_ref())?;

    let rows = run_pool(&grid, a.jobs, |cfg| sweep_point(&train, eval.as_ref(), cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let by_instance = rows.iter().all(|r| r.instance_auc.is_some());
    let score = |r: &SweepRow| {
        if by_instance {
            r.instance_auc.unwrap_or(f64::NEG_INFINITY)
        } else {
            r.bag_accuracy
        }
    };
    // First row wins ties so the choice is stable.
    let best = (0..rows.len()).fold(0, |b, i| {
        if score(&rows[i]) > score(&rows[b]) {
            i
        } else {
            b
        }
    });

    let mut csv = create(&g.out.join("sweep.csv"))?;
    writeln!(
        csv,
        "mu,warmup_T,seed,instance_auc,bag_auc,bag_accuracy,pseudo_precision,pseudo_accuracy,final_positive_fraction,best"
    )?;
    for (i, r) in rows.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.mu,
            r.warmup_t,
            r.seed,
            csv_opt(r.instance_auc),
            csv_opt(r.bag_auc),
            r.bag_accuracy,
            csv_opt(r.pseudo_precision),
            csv_opt(r.pseudo_accuracy),
            r.final_positive_fraction,
            i == best
        )?;
    }
    csv.flush()?;
    write_json(
        &g.out.join("summary.json"),
        &json!({
            "seed": g.seed,
            "selected_by": if by_instance { "instance_auc" } else { "bag_accuracy" },
            "best": rows[best],
            "rows": rows,
        }),
    )?;
    let b = &rows[best];
    println!(
        "{} grid points; best mu={} T={} (instance AUC {}, bag accuracy {:.4})",
        rows.len(),
        b.mu,
        b.warmup_t,
        fmt_opt(b.instance_auc),
        b.bag_accuracy
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

pub fn cmd_ablation(g: &Global, a: &AblationArgs) -> Result<()> {
    let base = train_config(&a.train, g.seed)?;
    let train = load_dataset(&a.data)?;
    train.require_both_classes()?;
    let eval = load_eval(&train, a.eval.as_ref())?;
    let table = run_ablation_suite(&train, &base, eval.as_ref())?;

    let mut csv = create(&g.out.join("ablation.csv"))?;
    table.write_csv(&mut csv)?;
    csv.flush()?;
    write_json(
        &g.out.join("ablation.json"),
        &json!({ "seed": g.seed, "config": base, "table": table }),
    )?;
    for r in &table.rows {
        println!(
            "soft={:<5} constrain={:<5} adaptive_mu={:<5} instance AUC {}",
            r.ablation.soft_labels,
            r.ablation.constrain,
            r.ablation.adaptive_mu,
            fmt_opt(r.instance_auc)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

pub fn cmd_baseline(g: &Global, a: &BaselineArgs) -> Result<()> {
    let cfg = BaselineConfig {
        kind: match a.kind {
            PoolArg::Max => PoolKind::Max,
            PoolArg::Mean => PoolKind::Mean,
            PoolArg::Attention => PoolKind::Attention,
        },
        sgd: SgdConfig {
            learning_rate: a.lr,
            batch_size: a.batch_size,
            epochs: a.epochs,
            seed: g.seed,
        },
        head: arch(a.head, a.hidden),
        attention_hidden: a.attention_hidden,
    };
    ensure!(
        cfg.attention_hidden > 0,
        "attention hidden width must be at least 1"
    );
    let train = load_dataset(&a.data)?;
    let tests = a
        .test
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<Vec<_>>>()?;
    for t in &tests {
        ensure!(
            t.feature_dim == train.feature_dim,
            "test split {} has {} features, training data {}",
            t.name,
            t.feature_dim,
            train.feature_dim
        );
    }
    let model = pool_baseline_train(&train, &cfg)?;
    write_json(&g.out.join("model.json"), &model)?;

    let mut rows = Vec::new();
    for ds in std::iter::once(&train).chain(&tests) {
        let m = model.evaluate(ds)?;
        println!(
            "{:<12} instance AUC {}, bag AUC {}, bag accuracy {:.4}",
            ds.name,
            fmt_opt(m.instance_auc),
            fmt_opt(m.bag_auc),
            m.bag_accuracy
        );
        rows.push(json!({
            "split": ds.name,
            "instance_auc": m.instance_auc,
            "bag_auc": m.bag_auc,
            "bag_accuracy": m.bag_accuracy,
        }));
    }
    let mut csv = create(&g.out.join("baseline.csv"))?;
    writeln!(csv, "split,instance_auc,bag_auc,bag_accuracy")?;
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{}",
            r["split"].as_str().unwrap_or_default(),
            csv_opt(r["instance_auc"].as_f64()),
            csv_opt(r["bag_auc"].as_f64()),
            r["bag_accuracy"]
        )?;
    }
    csv.flush()?;
    write_json(
        &g.out.join("baseline.json"),
        &json!({ "seed": g.seed, "config": cfg, "splits": rows }),
    )
}

// ---------------------------------------------------------------------------
// entropy
// ---------------------------------------------------------------------------

/// `"lo..hi"` (inclusive) or `"a,b,c"`.
fn parse_ks(spec: &str) -> Result<Vec<usize>> {
    let spec = spec.trim();
    let ks: Vec<usize> = if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo
            .trim()
            .parse()
            .with_context(|| format!("bad K range {spec:?}"))?;
        let hi: usize = hi
            .trim()
            .parse()
            .with_context(|| format!("bad K range {spec:?}"))?;
        ensure!(lo <= hi, "empty K range {spec:?}");
        (lo..=hi).collect()
    } else {
        spec.split(',')
            .map(|k| {
                k.trim()
                    .parse()
                    .with_context(|| format!("bad K value {k:?}"))
            })
            .collect::<Result<_>>()?
    };
    ensure!(!ks.is_empty(), "no K values");
    Ok(ks)
}

pub fn cmd_entropy(g: &Global, a: &EntropyArgs) -> Result<()> {
    let ks = parse_ks(&a.k)?;
    ensure!(a.p_steps > 0, "--p-steps must be at least 1");
    let denom = (a.p_steps + 1) as f64;
    let ps: Vec<f64> = (1..=a.p_steps).map(|i| i as f64 / denom).collect();
    let curve = entropy_curve(&ks, &ps)?;
    let path = g.out.join("entropy.csv");
    let mut csv = create(&path)?;
    write_entropy_csv(&curve, &mut csv)?;
    csv.flush()?;
    println!("wrote {} rows to {}", curve.len(), path.display());
    Ok(())
}
