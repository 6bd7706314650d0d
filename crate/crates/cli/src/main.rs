use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mahgcn::atlas::{compute_overlap, mapping_matrix, validate_atlas_set, LabelVolume};
use mahgcn::config::ExperimentConfig;
use mahgcn::connectome::{pearson_fcn, read_timeseries_csv, write_fcn_csv};
use mahgcn::dataset::{build_maps, load_dataset, write_dataset};
use mahgcn::explain::{
    auc_weighted_cam, group_cam, rsn_profile, subject_cams, write_cams, write_rsn_profiles, CamTarget,
};
use mahgcn::io::write_atomic;
use mahgcn::model::{Checkpoint, SampleGraphs, Variant};
use mahgcn::stats::{compare, format_mean_std, MetricRecord};
use mahgcn::synth::synth_generate;
use mahgcn::training::{holdout_cv, predict_scores, prepare_graphs, MetricsFile};
use mahgcn::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "mahgcn", version, about = "Multiscale atlas-guided hierarchical GCN toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labelled dataset with nested atlases.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pearson FCN from an ROI time-series CSV.
    Fcn {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlap table and mapping matrix between two atlases.
    AtlasMap {
        #[arg(long)]
        fine: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        th: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated holdout training and evaluation.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// mahgcn, magcn or gcn; overrides the config.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-score the held-out subjects of a training run from its checkpoints.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM maps and RSN profiles for a training run.
    Explain {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        class: usize,
        /// logit or probability.
        #[arg(long, default_value = "logit")]
        target: String,
    },
    /// Paired one-sided comparison of two runs (H1: a > b).
    Stats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "auc")]
        metric: String,
        /// Also write comparison.json and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the tool version.
    Version,
}

/// Collects inputs and outputs for the run manifest.
struct Run {
    command: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    config: Value,
    seed: Option<u64>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: Value::Null,
            seed: None,
        }
    }

    fn finish(self, manifest: &Path) -> Result<()> {
        let mut digests = BTreeMap::new();
        for p in &self.inputs {
            let bytes = std::fs::read(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            digests.insert(p.display().to_string(), format!("{:x}", Sha256::digest(&bytes)));
        }
        let m = json!({
            "tool": "mahgcn",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": digests,
            "outputs": self.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "timings": {"wall_seconds": self.started.elapsed().as_secs_f64()},
        });
        let text = serde_json::to_string_pretty(&m).expect("manifest serialises") + "\n";
        write_atomic(manifest, text.as_bytes())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) {
    if let Ok(rd) = std::fs::read_dir(dir) {
        let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                files_under(&p, out);
            } else {
                out.push(p);
            }
        }
    }
}

fn run_config(run: &Path) -> Result<(MetricsFile, ExperimentConfig)> {
    let metrics = MetricsFile::read(&run.join("metrics.json"))?;
    let cfg: ExperimentConfig = serde_json::from_value(metrics.config.clone())
        .map_err(|e| Error::Config(format!("config stored in {}: {e}", run.display())))?;
    Ok((metrics, cfg))
}

fn checkpoint_path(run: &Path, r: usize) -> PathBuf {
    run.join("checkpoints").join(format!("repeat_{r}.json"))
}

fn summary_lines(records: &[MetricRecord]) -> Vec<String> {
    let mut lines = Vec::new();
    for name in ["acc", "sen", "spe", "auc"] {
        let vals: Option<Vec<f64>> = records.iter().map(|r| r.metric(name).ok().flatten()).collect();
        match vals {
            Some(v) => lines.push(format!("{name} {}", format_mean_std(&v))),
            None => lines.push(format!("{name} NA")),
        }
    }
    lines
}

fn synth(config: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::load(config.as_deref())?;
    let mut run = Run::new("synth");
    run.inputs.extend(config);
    create_dir(&out)?;
    let ds = synth_generate(&cfg.synth, cfg.seed)?;
    run.outputs = write_dataset(&out, &ds)?;
    log::info!("wrote {} subjects to {}", ds.samples.len(), out.display());
    run.config = cfg.to_json();
    run.seed = Some(cfg.seed);
    run.finish(&out.join("manifest.json"))
}

fn fcn(input: PathBuf, out: PathBuf) -> Result<()> {
    let mut run = Run::new("fcn");
    let p = pearson_fcn(&read_timeseries_csv(&input)?)?;
    if p.has_warning() {
        log::warn!("zero-variance ROIs (1-based): {:?}", p.zero_variance.iter().map(|i| i + 1).collect::<Vec<_>>());
    }
    write_fcn_csv(&out, &p.fcn)?;
    run.inputs.push(input);
    run.outputs.push(out.clone());
    let mut m = out.into_os_string();
    m.push(".manifest.json");
    run.finish(Path::new(&m))
}

fn atlas_map(fine: PathBuf, coarse: PathBuf, th: f64, out: PathBuf) -> Result<()> {
    let mut run = Run::new("atlas-map");
    let f = LabelVolume::read(&fine)?;
    let c = LabelVolume::read(&coarse)?;
    create_dir(&out)?;
    let table = compute_overlap(&f, &c)?;
    let m = mapping_matrix(&table, th)?;
    let tag = format!("{}_{}", f.scale(), c.scale());
    let tp = out.join(format!("overlap_{tag}.tsv"));
    let mp = out.join(format!("mapping_{tag}.csv"));
    table.write(&tp)?;
    m.write_csv(&mp)?;
    let report = validate_atlas_set(&[f, c], th, &[])?;
    for r in &report {
        if r.zero_rows > 0 {
            log::warn!("{} fine ROIs have no coarse assignment at th={th}", r.zero_rows);
        }
    }
    let rp = out.join(format!("report_{tag}.json"));
    let text = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    write_atomic(&rp, text.as_bytes())?;
    run.inputs.extend([fine, coarse]);
    run.outputs.extend([tp, mp, rp]);
    run.config = json!({ "th": th });
    run.finish(&out.join("manifest.json"))
}

fn train(config: Option<PathBuf>, data: PathBuf, variant: Option<String>, out: PathBuf, jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    let mut cfg = ExperimentConfig::load(config.as_deref())?;
    if let Some(v) = variant {
        cfg.model.variant = v.parse::<Variant>()?;
        cfg.validate()?;
    }
    let mut run = Run::new("train");
    run.inputs.extend(config);
    let ds = load_dataset(&data, cfg.model.effective_scales())?;
    files_under(&data, &mut run.inputs);
    run.inputs.retain(|p| !p.ends_with("manifest.json"));
    let cv = holdout_cv(&cfg.model, &cfg.train, &ds, cfg.seed, jobs)?;
    create_dir(&out.join("checkpoints"))?;
    let metrics = MetricsFile {
        seed: cfg.seed,
        config: cfg.to_json(),
        repeats: cv.records,
    };
    let mp = out.join("metrics.json");
    metrics.write(&mp)?;
    run.outputs.push(mp);
    for (r, ck) in cv.checkpoints.iter().enumerate() {
        let p = checkpoint_path(&out, r);
        ck.write(&p)?;
        run.outputs.push(p);
    }
    for line in summary_lines(&metrics.repeats) {
        println!("{} {line}", cfg.model.variant);
    }
    run.config = cfg.to_json();
    run.seed = Some(cfg.seed);
    run.finish(&out.join("manifest.json"))
}

fn eval(run_dir: PathBuf, data: PathBuf, out: PathBuf) -> Result<()> {
    let mut run = Run::new("eval");
    let (metrics, cfg) = run_config(&run_dir)?;
    run.inputs.push(run_dir.join("metrics.json"));
    let ds = load_dataset(&data, cfg.model.effective_scales())?;
    let maps = build_maps(&cfg.model, &ds.atlases)?;
    let graphs = prepare_graphs(&cfg.model, &ds)?;
    let index: BTreeMap<&str, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut records = Vec::new();
    for (r, stored) in metrics.repeats.iter().enumerate() {
        let cp = checkpoint_path(&run_dir, r);
        let ck = Checkpoint::<f64>::read(&cp)?;
        run.inputs.push(cp);
        let idx = stored
            .test_ids
            .iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::Data(format!("subject {id} not in {}", data.display()))))
            .collect::<Result<Vec<usize>>>()?;
        let g: Vec<&SampleGraphs<f64>> = idx.iter().map(|&i| &graphs[i]).collect();
        let scores = predict_scores(&ck.config, &ck.params, &g, &maps)?;
        let labels = idx.iter().map(|&i| ds.samples[i].label).collect();
        let mut rec = MetricRecord::from_scores(scores, labels, stored.test_ids.clone())?;
        rec.train_loss = stored.train_loss.clone();
        records.push(rec);
    }
    create_dir(&out)?;
    let m = MetricsFile {
        seed: metrics.seed,
        config: metrics.config.clone(),
        repeats: records,
    };
    let mp = out.join("metrics.json");
    m.write(&mp)?;
    for line in summary_lines(&m.repeats) {
        println!("{} {line}", cfg.model.variant);
    }
    run.outputs.push(mp);
    run.config = metrics.config;
    run.seed = Some(metrics.seed);
    run.finish(&out.join("manifest.json"))
}

fn explain(run_dir: PathBuf, data: PathBuf, out: PathBuf, class: usize, target: String) -> Result<()> {
    let target: CamTarget = target.parse()?;
    let mut run = Run::new("explain");
    let (metrics, cfg) = run_config(&run_dir)?;
    run.inputs.push(run_dir.join("metrics.json"));
    let scales = cfg.model.effective_scales().to_vec();
    let ds = load_dataset(&data, &scales)?;
    let maps = build_maps(&cfg.model, &ds.atlases)?;
    let graphs = prepare_graphs(&cfg.model, &ds)?;
    let index: BTreeMap<&str, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut model_cams = Vec::new();
    let mut aucs = Vec::new();
    for (r, rec) in metrics.repeats.iter().enumerate() {
        let cp = checkpoint_path(&run_dir, r);
        let ck = Checkpoint::<f64>::read(&cp)?;
        run.inputs.push(cp);
        // disorder group: label-1 subjects of this repeat's test split, in id order
        let mut ids: Vec<&str> = rec
            .test_ids
            .iter()
            .zip(&rec.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(id, _)| id.as_str())
            .collect();
        ids.sort_unstable();
        let g = ids
            .iter()
            .map(|id| index.get(id).map(|&i| &graphs[i]).ok_or_else(|| Error::Data(format!("subject {id} not in {}", data.display()))))
            .collect::<Result<Vec<_>>>()?;
        let cams = subject_cams(&ck.config, &ck.params, &g, &maps, class, target)?;
        model_cams.push(group_cam(&cams).map_err(|e| Error::Data(format!("repeat {r}: {e}")))?);
        aucs.push(rec.auc);
    }
    let cams = auc_weighted_cam(&model_cams, &aucs)?;
    create_dir(&out)?;
    run.outputs.extend(write_cams(&out, &cams)?);
    if scales.iter().all(|s| ds.rsn.contains_key(s)) {
        let profiles = cams
            .iter()
            .map(|c| rsn_profile(c, &ds.rsn[&c.scale]))
            .collect::<Result<Vec<_>>>()?;
        let p = out.join("rsn_profile.csv");
        write_rsn_profiles(&p, &profiles)?;
        run.outputs.push(p);
    } else {
        log::warn!("RSN tables missing for some scales; rsn_profile.csv not written");
    }
    run.config = json!({ "run": metrics.config, "class": class, "target": target });
    run.seed = Some(metrics.seed);
    run.finish(&out.join("manifest.json"))
}

fn stats(a: PathBuf, b: PathBuf, metric: String, out: Option<PathBuf>) -> Result<()> {
    let mut run = Run::new("stats");
    let ma = MetricsFile::read(&a)?;
    let mb = MetricsFile::read(&b)?;
    let c = compare(&metric, &ma.repeats, &mb.repeats)?;
    let text = serde_json::to_string_pretty(&c).expect("comparison serialises") + "\n";
    print!("{text}");
    if let Some(dir) = out {
        create_dir(&dir)?;
        let p = dir.join("comparison.json");
        write_atomic(&p, text.as_bytes())?;
        run.inputs.extend([a, b]);
        run.outputs.push(p);
        run.config = json!({ "metric": metric });
        run.finish(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { config, out } => synth(config, out),
        Cmd::Fcn { input, out } => fcn(input, out),
        Cmd::AtlasMap { fine, coarse, th, out } => atlas_map(fine, coarse, th, out),
        Cmd::Train {
            config,
            data,
            variant,
            out,
            jobs,
        } => train(config, data, variant, out, jobs),
        Cmd::Eval { run, data, out } => eval(run, data, out),
        Cmd::Explain {
            run,
            data,
            out,
            class,
            target,
        } => explain(run, data, out, class, target),
        Cmd::Stats { a, b, metric, out } => stats(a, b, metric, out),
        Cmd::Version => {
            println!("mahgcn {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.tag(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
