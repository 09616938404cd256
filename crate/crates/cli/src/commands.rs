use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use tipcache::harness::{logits_accuracy, ALPHA_GRID, BETA_GRID};
use tipcache::report::{
    config_hash, fingerprint, read_reports_csv, read_reports_json, reports_to_string, ReportIndex,
};
use tipcache::{
    blended_logits, build_cache, clip_adapter_logits, load_classifier, load_embeddings,
    mlp_form_logits, prototype_reduce, run_ablation, save_classifier, save_embeddings, sweep,
    synth_generate, train, train_clip_adapter, train_linear_probe, zero_shot_logits,
    AblationInputs, AdapterConfig, CacheMeta, CacheModel, EmbeddingSet, EvalReport, LogitsBatch,
    Schedule, Selection, SweepGrid, SynthConfig, TextClassifier, TrainConfig,
};

use crate::args::*;

#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent flags; exit code 2.
    Usage(String),
    /// Invalid data or a failed computation; exit code 1.
    Data(tipcache::Error),
    /// A data error tied to a specific file.
    File(PathBuf, tipcache::Error),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Data(e) | CliError::File(_, e) => e.code(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::File(..) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::File(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<tipcache::Error> for CliError {
    fn from(e: tipcache::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::BuildCache(a) => build(a),
        Command::Eval(a) => eval(a),
        Command::Finetune(a) => finetune(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportReport(a) => export(a),
    }
}

/// Loads a set and normalizes it if the file was not flagged as normalized.
fn load_set(path: &Path) -> CliResult<EmbeddingSet> {
    let at = |e| CliError::File(path.to_path_buf(), e);
    let set = load_embeddings(path).map_err(at)?;
    if set.is_normalized() {
        Ok(set)
    } else {
        log::info!("normalizing rows of {}", path.display());
        set.into_normalized().map_err(at)
    }
}

fn load_clf(path: &Path) -> CliResult<TextClassifier> {
    load_classifier(path).map_err(|e| CliError::File(path.to_path_buf(), e))
}

fn file_entry(path: &Path, set: &EmbeddingSet) -> Value {
    json!({ "path": path.display().to_string(), "crc32": fingerprint(set) })
}

fn clf_entry(path: &Path, clf: &TextClassifier) -> Value {
    json!({
        "path": path.display().to_string(),
        "crc32": tipcache::report::classifier_fingerprint(clf),
    })
}

/// Hash of a run's inputs by content: file paths are dropped so the same data
/// and settings hash the same from any location.
fn inputs_hash(inputs: &Value) -> String {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(map) => {
                map.remove("path");
                map.values_mut().for_each(strip);
            }
            Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v = inputs.clone();
    strip(&mut v);
    config_hash(&v)
}

fn stdout_write(text: &str) -> CliResult {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

/// Prints the reports and, with `--out`, writes the report file and merges
/// every report's inputs into `index.json`.
fn emit(reports: &[EvalReport], output: &OutputArgs, inputs: &Value) -> CliResult {
    let text = reports_to_string(reports, output.format.into())?;
    stdout_write(&text)?;
    if let Some(dir) = &output.out {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(format!("report.{}", output.format.extension())),
            &text,
        )?;
        let mut index = ReportIndex::default();
        for r in reports {
            let mut entry = inputs.clone();
            entry["method"] = json!(r.method);
            index.insert(&r.config_hash, entry);
        }
        index.merge_into(dir.join("index.json"))?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        num_classes: a.classes,
        shots: a.shots,
        test_per_class: a.test_per_class,
        val_per_class: a.val_per_class,
        dim: a.dim,
        noise_sigma: a.sigma,
        classifier_misalignment: a.misalignment,
        seed: a.seed,
    };
    let data = synth_generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut written = vec![
        ("train", a.out.join("train.emb"), data.train.rows()),
        ("test", a.out.join("test.emb"), data.test.rows()),
    ];
    save_embeddings(&data.train, &written[0].1)?;
    save_embeddings(&data.test, &written[1].1)?;
    if let Some(val) = &data.val {
        let path = a.out.join("val.emb");
        save_embeddings(val, &path)?;
        written.push(("val", path, val.rows()));
    }
    let clf_path = a.out.join("clf.emb");
    save_classifier(&data.clf, &clf_path)?;
    written.push(("clf", clf_path, data.clf.num_classes()));
    let mut text = String::new();
    for (name, path, rows) in written {
        text.push_str(&format!("{name} rows={rows} path={}\n", path.display()));
    }
    stdout_write(&text)
}

fn build(a: BuildCacheArgs) -> CliResult {
    let mut set = load_set(&a.train)?;
    if let Some(k) = a.cache_size {
        set = prototype_reduce(&set, k, a.seed)?.0;
    }
    let cache = build_cache(&set, a.alpha, a.beta)?;
    let meta = CacheMeta {
        alpha: a.alpha,
        beta: a.beta,
        shots_effective: cache.shots_effective(),
        seed: a.seed,
        provenance: Some(format!("{} crc32={}", a.train.display(), fingerprint(&set))),
    };
    cache.save(&a.out, &meta)?;
    stdout_write(&format!(
        "cache entries={} per_class={} alpha={} beta={} path={}\n",
        cache.len(),
        cache.shots_effective(),
        a.alpha,
        a.beta,
        a.out.display()
    ))
}

fn eval(a: EvalArgs) -> CliResult {
    let test = load_set(&a.test)?;
    let clf = load_clf(&a.clf)?;
    let mut files = json!({
        "test": file_entry(&a.test, &test),
        "clf": clf_entry(&a.clf, &clf),
    });

    let cache: Option<CacheModel> = match (a.mode, &a.train, &a.cache) {
        (EvalMode::Zeroshot, _, _) => None,
        (_, Some(path), _) => {
            let set = load_set(path)?;
            files["train"] = file_entry(path, &set);
            let alpha = a.alpha.unwrap_or(tipcache::DEFAULT_ALPHA);
            let beta = a.beta.unwrap_or(tipcache::DEFAULT_BETA);
            Some(build_cache(&set, alpha, beta)?)
        }
        (_, None, Some(dir)) => {
            let (cache, meta) =
                CacheModel::load(dir).map_err(|e| CliError::File(dir.clone(), e))?;
            files["cache"] = json!({
                "path": dir.display().to_string(),
                "meta": meta,
                "keys_hash": config_hash(&cache.keys()),
            });
            let alpha = a.alpha.unwrap_or(meta.alpha);
            let beta = a.beta.unwrap_or(meta.beta);
            Some(cache.with_hyperparams(alpha, beta)?)
        }
        (_, None, None) => {
            return Err(CliError::Usage(
                "eval needs --train or --cache unless --mode zeroshot".into(),
            ))
        }
    };

    let started = Instant::now();
    let (method, logits, shots, alpha, beta) = match (&cache, a.mode) {
        (Some(c), EvalMode::Tip) => (
            "tip-adapter",
            blended_logits(&test, c, &clf)?,
            c.shots_effective(),
            Some(c.alpha()),
            Some(c.beta()),
        ),
        (Some(c), EvalMode::TipMlp) => (
            "tip-adapter[mlp-form]",
            mlp_form_logits(&test, c, &clf)?,
            c.shots_effective(),
            Some(c.alpha()),
            Some(c.beta()),
        ),
        _ => (
            "zero-shot",
            LogitsBatch::plain(zero_shot_logits(&test, &clf)?),
            0,
            None,
            None,
        ),
    };
    let top1 = logits_accuracy(&logits, &test)?;
    let eval_seconds = started.elapsed().as_secs_f64();

    let inputs = json!({
        "command": "eval",
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "alpha": alpha,
        "beta": beta,
        "seed": a.seed,
        "files": files,
    });
    let report = EvalReport {
        method: method.into(),
        shots,
        alpha,
        beta,
        top1,
        num_test: test.rows(),
        seed: a.seed,
        train_seconds: 0.0,
        eval_seconds,
        config_hash: inputs_hash(&inputs),
    };
    emit(&[report], &a.output, &inputs)
}

fn train_config(t: &TrainArgs, default_epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: t.epochs.unwrap_or(default_epochs),
        batch_size: t.batch,
        base_lr: t.lr,
        schedule: Schedule::Cosine,
        optimizer: t.optimizer.into(),
        weight_decay: t.weight_decay,
        seed,
        unfreeze: t.unfreeze.into(),
    }
}

fn finetune(a: FinetuneArgs) -> CliResult {
    let train_set = load_set(&a.train)?;
    let clf = load_clf(&a.clf)?;
    let test = a.test.as_deref().map(load_set).transpose()?;
    let mut files = json!({
        "train": file_entry(&a.train, &train_set),
        "clf": clf_entry(&a.clf, &clf),
    });
    if let (Some(path), Some(set)) = (&a.test, &test) {
        files["test"] = file_entry(path, set);
    }
    if let Some(dir) = &a.output.out {
        fs::create_dir_all(dir)?;
    }
    let out_file = |name: &str| a.output.out.as_ref().map(|d| d.join(name));

    let started = Instant::now();
    let (method, cfg, alpha, beta, trace, logits) = match a.method {
        Method::TipAdapterF => {
            let cfg = train_config(&a.train_args, 20, a.seed);
            let alpha = a.alpha.unwrap_or(tipcache::DEFAULT_ALPHA);
            let cache = build_cache(&train_set, alpha, a.beta)?;
            let (tuned, trace) = train(&train_set, &cache, &clf, &cfg)?;
            if let Some(dir) = &a.output.out {
                let meta = CacheMeta {
                    alpha,
                    beta: a.beta,
                    shots_effective: tuned.shots_effective(),
                    seed: a.seed,
                    provenance: Some(format!(
                        "finetune {} crc32={} unfreeze={}",
                        a.train.display(),
                        fingerprint(&train_set),
                        cfg.unfreeze.label()
                    )),
                };
                tuned.save(dir, &meta)?;
            }
            let logits = test
                .as_ref()
                .map(|t| blended_logits(t, &tuned, &clf))
                .transpose()?;
            (
                "tip-adapter-f",
                cfg,
                Some(alpha),
                Some(a.beta),
                trace,
                logits,
            )
        }
        Method::ClipAdapter => {
            let cfg = train_config(&a.train_args, 200, a.seed);
            let adapter_cfg = AdapterConfig {
                hidden: a.hidden,
                alpha: a.alpha.unwrap_or(AdapterConfig::default().alpha),
            };
            let (adapter, trace) = train_clip_adapter(&train_set, &clf, &adapter_cfg, &cfg)?;
            if let Some(path) = out_file("adapter.json") {
                let text = serde_json::to_string_pretty(&adapter)
                    .map_err(|e| tipcache::Error::Serialize(e.to_string()))?;
                fs::write(path, text + "\n")?;
            }
            let logits = test
                .as_ref()
                .map(|t| clip_adapter_logits(t, &adapter, &clf))
                .transpose()?;
            (
                "clip-adapter",
                cfg,
                Some(adapter_cfg.alpha),
                None,
                trace,
                logits,
            )
        }
        Method::LinearProbe => {
            let cfg = train_config(&a.train_args, 1000, a.seed);
            let (probe, stats) =
                train_linear_probe(&train_set, train_set.num_classes(), a.l2, &cfg)?;
            log::info!(
                "probe steps={} loss={} converged={}",
                stats.steps,
                stats.loss,
                stats.converged
            );
            if let Some(path) = out_file("probe.json") {
                let text = serde_json::to_string_pretty(&json!({ "probe": probe, "stats": stats }))
                    .map_err(|e| tipcache::Error::Serialize(e.to_string()))?;
                fs::write(path, text + "\n")?;
            }
            let logits = test.as_ref().map(|t| probe.logits(t)).transpose()?;
            ("linear-probe", cfg, None, None, Default::default(), logits)
        }
    };
    let train_seconds = started.elapsed().as_secs_f64();
    if let Some(path) = out_file("trace.csv") {
        trace.write_csv(fs::File::create(path)?)?;
    }

    let inputs = json!({
        "command": "finetune",
        "method": method,
        "alpha": alpha,
        "beta": beta,
        "train_cfg": cfg,
        "hidden": a.hidden,
        "l2": a.l2,
        "files": files,
    });
    match (logits, &test) {
        (Some(logits), Some(test)) => {
            let eval_started = Instant::now();
            let top1 = logits_accuracy(&logits, test)?;
            let report = EvalReport {
                method: method.into(),
                shots: train_set.balanced_shots()?,
                alpha,
                beta,
                top1,
                num_test: test.rows(),
                seed: a.seed,
                train_seconds,
                eval_seconds: eval_started.elapsed().as_secs_f64(),
                config_hash: inputs_hash(&inputs),
            };
            emit(&[report], &a.output, &inputs)
        }
        _ => {
            let mut buf = Vec::new();
            trace.write_csv(&mut buf)?;
            stdout_write(&String::from_utf8_lossy(&buf))
        }
    }
}

fn run_sweep(a: SweepArgs) -> CliResult {
    let train_set = load_set(&a.train)?;
    let test = load_set(&a.test)?;
    let clf = load_clf(&a.clf)?;
    let val = a.val.as_deref().map(load_set).transpose()?;
    let alphas = if a.alphas.is_empty() {
        ALPHA_GRID.to_vec()
    } else {
        a.alphas.clone()
    };
    let betas = if a.betas.is_empty() {
        BETA_GRID.to_vec()
    } else {
        a.betas.clone()
    };
    let selection = match a.selection {
        SelectionArg::Val => Selection::HeldoutVal,
        SelectionArg::Train => Selection::TrainSet,
    };
    let grid =
        SweepGrid::new(alphas, betas, selection).map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = sweep(&train_set, val.as_ref(), &test, &clf, &grid, a.seed)?;

    let mut files = json!({
        "train": file_entry(&a.train, &train_set),
        "test": file_entry(&a.test, &test),
        "clf": clf_entry(&a.clf, &clf),
    });
    if let (Some(path), Some(set)) = (&a.val, &val) {
        files["val"] = file_entry(path, set);
    }
    let inputs = json!({
        "command": "sweep",
        "grid": grid,
        "selected_on": format!("{:?}", outcome.selected_on),
        "seed": a.seed,
        "files": files,
    });
    if let Some(dir) = &a.output.out {
        fs::create_dir_all(dir)?;
        let cells = serde_json::to_string_pretty(&outcome.cells)
            .map_err(|e| tipcache::Error::Serialize(e.to_string()))?;
        fs::write(dir.join("sweep_cells.json"), cells + "\n")?;
    }
    emit(&[outcome.report], &a.output, &inputs)
}

fn ablate(a: AblateArgs) -> CliResult {
    let train_set = load_set(&a.train)?;
    let test = load_set(&a.test)?;
    let clf = load_clf(&a.clf)?;
    let cfg = train_config(&a.train_args, 20, a.seed);
    let inputs = AblationInputs {
        train: &train_set,
        test: &test,
        clf: &clf,
        alpha: a.alpha,
        beta: a.beta,
        seed: a.seed,
        train_cfg: cfg.clone(),
    };
    let ablation: tipcache::Ablation = a.name.into();
    let reports = run_ablation(ablation, &inputs)?;
    let index_inputs = json!({
        "command": "ablate",
        "name": ablation.name(),
        "alpha": a.alpha,
        "beta": a.beta,
        "seed": a.seed,
        "train_cfg": cfg,
        "files": {
            "train": file_entry(&a.train, &train_set),
            "test": file_entry(&a.test, &test),
            "clf": clf_entry(&a.clf, &clf),
        },
    });
    emit(&reports, &a.output, &index_inputs)
}

fn read_any(path: &PathBuf) -> CliResult<Vec<EvalReport>> {
    let at = |e| CliError::File(path.clone(), e);
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_reports_json(path).map_err(at),
        Some("csv") => read_reports_csv(path).map_err(at),
        _ => Err(CliError::Usage(format!(
            "cannot tell report format of {} (expected .json or .csv)",
            path.display()
        ))),
    }
}

fn export(a: ExportArgs) -> CliResult {
    let mut all = Vec::new();
    for path in &a.input {
        all.extend(read_any(path)?);
    }
    let text = reports_to_string(&all, a.format.into())?;
    match &a.out {
        Some(path) => Ok(fs::write(path, text)?),
        None => stdout_write(&text),
    }
}
