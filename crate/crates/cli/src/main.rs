use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use auscult::audio::{log_mel_spectrogram_with, FrontendConfig};
use auscult::emr::{
    balance_classes, cluster_summary, correlation_matrix, export_3d_coordinates, gbdt_fit, select_k, write_matrix_csv,
    write_summary_csv, Column, EmrTable, GbdtModel, GbdtParams, DIAGNOSIS_COLUMN,
};
use auscult::fusion::{
    aggregate_by_patient, alpha_sweep, compute_metrics, confusion_counts, write_sweep_csv, Aggregation, ProbabilityVector,
};
use auscult::io::{
    build_event_dataset, load_wav, read_probability_csv, read_truth_csv, write_probability_csv, write_spectrogram_bin,
    write_spectrogram_csv, LabelScheme, Manifest,
};
use auscult::model::{preset_config, ReneConfig, ReneModel, ReneNet};
use auscult::nn::ParameterSet;
use auscult::stream::{event_json, overrun_json, replay_offline, run_session, SessionConfig, Source, StreamMessage};
use auscult::train::{accuracy, synthetic_tone_noise, train_toy, write_loss_trace, LabeledDataset, TrainConfig};

#[derive(Parser)]
#[command(name = "auscult", version, about = "Respiratory sound analysis and EMR fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export the log-mel spectrogram of a WAV file
    Featurize {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// csv or bin
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Train a classifier with focal loss and class-balanced sampling
    Train(TrainArgs),
    /// Score a trained model on a manifest
    Eval(EvalArgs),
    /// K-means over EMR columns with silhouette-based k selection
    Cluster(ClusterArgs),
    /// Pearson correlation matrix of EMR columns
    Correlate {
        #[arg(long)]
        emr: PathBuf,
        /// Comma-separated numeric columns (default: all numeric)
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Oversample minority classes of an EMR table
    Smote {
        #[arg(long)]
        emr: PathBuf,
        #[arg(long, default_value = DIAGNOSIS_COLUMN)]
        label: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient-boosted trees on EMR features
    #[command(subcommand)]
    Gbdt(GbdtCommand),
    /// Sweep the audio/EMR fusion weight from 0 to 1
    Fuse {
        #[arg(long)]
        rene: PathBuf,
        #[arg(long)]
        gbdt: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Class treated as normal (default: "normal" if present, else the first)
        #[arg(long)]
        normal_class: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Live session from a WAV source paced as a microphone
    Stream(StreamArgs),
    /// Decode the same windows as `stream`, synchronously
    Replay(StreamArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model directory, or a parameter file together with --config
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV; without it a synthetic tone-vs-noise set is used
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// events, binary, or a comma-separated class list
    #[arg(long, default_value = "events")]
    labels: String,
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Model config file (overrides --preset)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    synthetic_clips: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model directory
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "events")]
    labels: String,
    #[arg(long)]
    normal_class: Option<String>,
    /// Aggregate clips per patient: mean or max
    #[arg(long)]
    patient_level: Option<String>,
    /// Per-item probabilities CSV (input for `fuse`)
    #[arg(long)]
    probs_out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    emr: PathBuf,
    /// Comma-separated numeric columns (default: all numeric)
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    #[arg(long, default_value_t = 8)]
    k_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Summary CSV (counts, means, modes per cluster)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Three columns for a scatter export, comma-separated
    #[arg(long, value_delimiter = ',')]
    axes: Vec<String>,
    #[arg(long)]
    coords_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GbdtCommand {
    Fit {
        #[arg(long)]
        emr: PathBuf,
        #[arg(long, default_value = DIAGNOSIS_COLUMN)]
        label: String,
        /// Comma-separated feature columns (default: all numeric)
        #[arg(long, value_delimiter = ',')]
        features: Vec<String>,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long)]
        model_out: PathBuf,
        /// Gain importance per feature
        #[arg(long)]
        importance_out: Option<PathBuf>,
    },
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        emr: PathBuf,
        /// Column holding row ids (default: row number)
        #[arg(long)]
        id_column: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    source: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1.0)]
    rate_factor: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(auscult::Error),
}

impl From<auscult::Error> for Failure {
    fn from(e: auscult::Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| auscult::Error::Io { path: path.to_path_buf(), source: e }.into())
}

/// File if given, stdout otherwise.
fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load_model(args: &ModelArgs) -> CliResult<ReneModel> {
    if args.model.is_dir() {
        if args.config.is_some() {
            return Err(usage("--config applies only when --model is a parameter file"));
        }
        return Ok(ReneModel::load(&args.model)?);
    }
    let cfg_path = args
        .config
        .as_ref()
        .ok_or_else(|| usage("--model is a parameter file; pass its --config too"))?;
    let net = ReneNet::new(&ReneConfig::load(cfg_path)?)?;
    Ok(ReneModel::from_parts(net, ParameterSet::load(&args.model)?)?)
}

fn normal_index(class_names: &[String], requested: Option<&str>) -> CliResult<usize> {
    match requested {
        Some(name) => class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| usage(format!("normal class {name:?} is not one of {class_names:?}"))),
        None => Ok(class_names.iter().position(|c| c == "normal").unwrap_or(0)),
    }
}

fn featurize(input: &Path, out: &Path, format: &str) -> CliResult {
    let frontend = FrontendConfig::default();
    let signal = load_wav(input)?;
    let spec = log_mel_spectrogram_with(&signal, &frontend, None)?;
    let w = create(out)?;
    match format {
        "csv" => write_spectrogram_csv(&spec.frames, w)?,
        "bin" => write_spectrogram_bin(&spec, w)?,
        other => return Err(usage(format!("unknown format {other:?} (csv or bin)"))),
    }
    eprintln!("{} frames x {} mel bins -> {}", spec.n_frames(), spec.n_mels(), out.display());
    Ok(())
}

fn with_class_names(cfg: ReneConfig, names: Vec<String>) -> ReneConfig {
    ReneConfig {
        class_names: names.clone(),
        ..cfg.with_classes(names.len())
    }
}

fn train(a: &TrainArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => ReneConfig::load(p)?,
        None => preset_config(&a.preset)?,
    };
    let data = match &a.manifest {
        Some(m) => {
            let scheme: LabelScheme = a.labels.parse()?;
            let ds = build_event_dataset(&Manifest::load(m)?, &FrontendConfig::default(), &scheme)?;
            cfg = with_class_names(cfg, ds.class_names.clone());
            ds.dataset
        }
        None => {
            let clips = synthetic_tone_noise(a.synthetic_clips, 2.0, a.seed)?;
            cfg = with_class_names(cfg, vec!["tone".into(), "noise".into()]);
            LabeledDataset::from_signals(&clips, &FrontendConfig::default(), 2)?
        }
    };
    eprintln!("{} clips, class counts {:?}", data.len(), data.class_counts());
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        lr0: a.lr.unwrap_or(defaults.lr0),
        gamma: a.gamma.unwrap_or(defaults.gamma),
        seed: a.seed,
        ..defaults
    };
    let outcome = train_toy(&data, &cfg, &tc)?;
    let model = ReneModel::from_parts(ReneNet::new(&cfg)?, outcome.params)?;
    let acc = accuracy(model.net(), &model.params, &data)?;
    model.save(&a.out)?;
    if let Some(p) = &a.trace {
        write_loss_trace(&outcome.trace, create(p)?)?;
    }
    let last = outcome.trace.last().map_or(f64::NAN, |e| e.mean_loss);
    println!("final loss {last:.6}, training accuracy {acc:.4}, model saved to {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let scheme: LabelScheme = a.labels.parse()?;
    let manifest = Manifest::load(&a.manifest)?;
    let ds = build_event_dataset(&manifest, &model.frontend, &scheme)?;
    if ds.class_names != model.config().class_names() {
        return Err(Failure::Data(auscult::Error::InvalidInput(format!(
            "manifest classes {:?} differ from model classes {:?}",
            ds.class_names,
            model.config().class_names()
        ))));
    }
    let normal = normal_index(&ds.class_names, a.normal_class.as_deref())?;
    let mut items: Vec<(String, ProbabilityVector)> = Vec::new();
    let mut truths = Vec::new();
    for (i, (x, &y)) in ds.dataset.items().iter().zip(ds.dataset.labels()).enumerate() {
        let clip = &ds.clips[i];
        let stem = manifest.entries[clip.entry].wav_path.file_stem().unwrap_or_default().to_string_lossy();
        items.push((format!("{}/{stem}@{}", clip.patient_id, clip.begin_s), model.predict_frames(x)?.probs));
        truths.push((clip.patient_id.clone(), y));
    }
    let (ids, probs, labels): (Vec<String>, Vec<ProbabilityVector>, Vec<usize>) = match &a.patient_level {
        None => {
            let labels = truths.iter().map(|t| t.1).collect();
            let (ids, probs) = items.into_iter().unzip();
            (ids, probs, labels)
        }
        Some(how) => {
            let how: Aggregation = how.parse()?;
            let by_patient: Vec<(String, ProbabilityVector)> = items
                .iter()
                .zip(&truths)
                .map(|((_, p), (pid, _))| (pid.clone(), p.clone()))
                .collect();
            let agg = aggregate_by_patient(&by_patient, how)?;
            let mut labels = Vec::new();
            for (pid, _) in &agg {
                let mut ys = truths.iter().filter(|t| &t.0 == pid).map(|t| t.1);
                let first = ys.next().expect("patient has clips");
                if ys.any(|y| y != first) {
                    return Err(Failure::Data(auscult::Error::InvalidInput(format!(
                        "patient {pid} has clips with different labels; patient-level scoring needs one"
                    ))));
                }
                labels.push(first);
            }
            let (ids, probs) = agg.into_iter().unzip();
            (ids, probs, labels)
        }
    };
    let preds: Vec<usize> = probs.iter().map(ProbabilityVector::argmax).collect();
    let m = compute_metrics(&confusion_counts(&preds, &labels, normal)?)?;
    println!("items,se,sp,as,hs,score");
    println!("{},{:.4},{:.4},{:.4},{:.4},{:.4}", labels.len(), m.se, m.sp, m.as_score, m.hs, m.final_score);
    if let Some(p) = &a.probs_out {
        write_probability_csv(&ids, &probs, create(p)?)?;
    }
    Ok(())
}

fn numeric_columns(table: &EmrTable, requested: &[String]) -> Vec<String> {
    if requested.is_empty() {
        table.numeric_names().into_iter().map(str::to_string).collect()
    } else {
        requested.to_vec()
    }
}

fn cluster(a: &ClusterArgs) -> CliResult {
    if a.k_min > a.k_max {
        return Err(usage(format!("--k-min {} exceeds --k-max {}", a.k_min, a.k_max)));
    }
    let table = EmrTable::from_csv(&a.emr)?;
    let cols = numeric_columns(&table, &a.columns);
    let points = table.numeric_matrix(&cols)?;
    let sel = select_k(&points, a.k_min..=a.k_max, a.seed, a.restarts)?;
    for (k, s) in &sel.scores {
        eprintln!("k={k} silhouette={s:.4}");
    }
    write_summary_csv(&cluster_summary(&table, &sel.model)?, create(&a.out)?)?;
    if let Some(p) = &a.model_out {
        let mut w = create(p)?;
        w.write_all(sel.model.to_json()?.as_bytes())
            .map_err(|e| auscult::Error::Io { path: p.clone(), source: e })?;
    }
    match (&a.coords_out, a.axes.as_slice()) {
        (None, []) => {}
        (Some(p), [x, y, z]) => {
            let n = export_3d_coordinates(&table, [x, y, z], DIAGNOSIS_COLUMN, create(p)?)?;
            eprintln!("{n} points -> {}", p.display());
        }
        _ => return Err(usage("--coords-out needs --axes with exactly three columns")),
    }
    println!("best k {} (silhouette {:.4})", sel.best_k, sel.model.silhouette_mean);
    Ok(())
}

fn correlate(emr: &Path, columns: &[String], out: Option<&Path>) -> CliResult {
    let table = EmrTable::from_csv(emr)?;
    let cols = numeric_columns(&table, columns);
    let m = correlation_matrix(&table, &cols)?;
    write_matrix_csv(&cols, &m, output(out)?)?;
    Ok(())
}

fn smote(emr: &Path, label: &str, k: usize, seed: u64, out: &Path) -> CliResult {
    let table = EmrTable::from_csv(emr)?;
    let (codes, mapping) = table.encoded(label)?;
    let cols: Vec<String> = table.numeric_names().into_iter().filter(|c| *c != label).map(str::to_string).collect();
    let (x, y) = balance_classes(&table.numeric_matrix(&cols)?, &codes, k, seed)?;
    let mut names = cols.clone();
    names.push(label.to_string());
    let mut columns: Vec<Column> = x.columns().into_iter().map(|c| Column::Numeric(c.to_vec())).collect();
    columns.push(Column::Categorical(
        y.iter().map(|&c| mapping.decode(c).expect("code from mapping").to_string()).collect(),
    ));
    EmrTable::new(names, columns)?.write_csv(create(out)?)?;
    eprintln!("{} rows -> {} rows", table.n_rows(), y.len());
    Ok(())
}

fn gbdt(cmd: &GbdtCommand) -> CliResult {
    match cmd {
        GbdtCommand::Fit { emr, label, features, rounds, max_depth, learning_rate, model_out, importance_out } => {
            let table = EmrTable::from_csv(emr)?;
            let (codes, mapping) = table.encoded(label)?;
            let cols: Vec<String> = numeric_columns(&table, features).into_iter().filter(|c| c != label).collect();
            let x = table.numeric_matrix(&cols)?;
            let params = GbdtParams {
                n_rounds: *rounds,
                max_depth: *max_depth,
                learning_rate: *learning_rate,
                ..GbdtParams::default()
            };
            let model = gbdt_fit(&x, &codes, &params)?
                .with_class_names(mapping.classes.clone())?
                .with_feature_names(cols.clone())?;
            let hits = (0..x.nrows())
                .filter(|&r| {
                    model
                        .predict_proba(x.row(r).as_slice().expect("standard layout"))
                        .is_ok_and(|p| p.argmax() == codes[r])
                })
                .count();
            let mut w = create(model_out)?;
            w.write_all(model.to_json()?.as_bytes())
                .map_err(|e| auscult::Error::Io { path: model_out.clone(), source: e })?;
            if let Some(p) = importance_out {
                let mut w = create(p)?;
                let write = |w: &mut BufWriter<File>| -> io::Result<()> {
                    writeln!(w, "feature,gain")?;
                    for (c, g) in cols.iter().zip(&model.feature_gains) {
                        writeln!(w, "{c},{g}")?;
                    }
                    w.flush()
                };
                write(&mut w).map_err(|e| auscult::Error::Io { path: p.clone(), source: e })?;
            }
            println!("training accuracy {:.4}", hits as f64 / x.nrows() as f64);
        }
        GbdtCommand::Predict { model, emr, id_column, out } => {
            let text = std::fs::read_to_string(model).map_err(|e| auscult::Error::Io { path: model.clone(), source: e })?;
            let m = GbdtModel::from_json(&text)?;
            if m.feature_names.is_empty() {
                return Err(usage("model file has no feature names; refit it with `gbdt fit`"));
            }
            let table = EmrTable::from_csv(emr)?;
            let x = table.numeric_matrix(&m.feature_names)?;
            let ids: Vec<String> = match id_column {
                Some(c) => match table.column(c)? {
                    Column::Categorical(v) => v.clone(),
                    Column::Numeric(v) => v.iter().map(f64::to_string).collect(),
                },
                None => (0..table.n_rows()).map(|i| i.to_string()).collect(),
            };
            let probs = x
                .rows()
                .into_iter()
                .map(|r| m.predict_proba(&r.to_vec()))
                .collect::<auscult::Result<Vec<_>>>()?;
            write_probability_csv(&ids, &probs, output(out.as_deref())?)?;
        }
    }
    Ok(())
}

fn fuse(rene: &Path, gbdt: &Path, truth: &Path, normal: Option<&str>, out: Option<&Path>) -> CliResult {
    let a = read_probability_csv(rene)?;
    let b = read_probability_csv(gbdt)?;
    if a.class_names != b.class_names {
        return Err(Failure::Data(auscult::Error::InvalidInput(format!(
            "class columns differ: {:?} vs {:?}",
            a.class_names, b.class_names
        ))));
    }
    let truths = read_truth_csv(truth, &a.class_names)?;
    let mut pa = Vec::new();
    let mut pb = Vec::new();
    let mut ys = Vec::new();
    for (id, y) in &truths {
        let missing = |file: &Path| auscult::Error::Range {
            entry: file.display().to_string(),
            msg: format!("no row for id {id:?}"),
        };
        pa.push(a.rows[a.position(id).ok_or_else(|| missing(rene))?].clone());
        pb.push(b.rows[b.position(id).ok_or_else(|| missing(gbdt))?].clone());
        ys.push(*y);
    }
    let rows = alpha_sweep(&pa, &pb, &ys, normal_index(&a.class_names, normal)?)?;
    write_sweep_csv(&rows, output(out)?)?;
    Ok(())
}

fn stream(a: &StreamArgs, live: bool) -> CliResult {
    let model = load_model(&a.model)?;
    let cfg = SessionConfig {
        rate_factor: a.rate_factor,
        ..SessionConfig::new(Source::Wav(a.source.clone()))
    };
    let out_path = a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut w = output(a.out.as_deref())?;
    let mut emit = |line: &dyn std::fmt::Display| -> auscult::Result<()> {
        writeln!(w, "{line}").and_then(|()| w.flush()).map_err(|e| auscult::Error::Io {
            path: out_path.clone(),
            source: e,
        })
    };
    if live {
        let stats = run_session(&cfg, &model, |msg| match msg {
            StreamMessage::Event(e) => emit(&event_json(&e)),
            StreamMessage::Overrun { from, to, t } => {
                eprintln!("warning: decoder overrun, skipped windows {from}..{to}");
                emit(&overrun_json(from, to, t))
            }
        })?;
        eprintln!("{} events, {} overruns", stats.events, stats.overruns);
    } else {
        for e in replay_offline(&cfg, &model)? {
            emit(&event_json(&e))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Featurize { input, out, format } => featurize(&input, &out, &format),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Cluster(a) => cluster(&a),
        Command::Correlate { emr, columns, out } => correlate(&emr, &columns, out.as_deref()),
        Command::Smote { emr, label, k, seed, out } => smote(&emr, &label, k, seed, &out),
        Command::Gbdt(cmd) => gbdt(&cmd),
        Command::Fuse { rene, gbdt, truth, normal_class, out } => {
            fuse(&rene, &gbdt, &truth, normal_class.as_deref(), out.as_deref())
        }
        Command::Stream(a) => stream(&a, true),
        Command::Replay(a) => stream(&a, false),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
