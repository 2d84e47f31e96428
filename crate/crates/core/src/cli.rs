//! The `sac` command line: subcommand dispatch, artifact writers and the
//! seed × mode experiment matrix.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, KEYS};
use crate::datagen::{self, Dataset, Modality, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::localizer::{self, AttentionMode, EpochLog, LocalizerConfig};
use crate::metrics::{students_t, Detection, GroundTruth, TTestReport};
use crate::ot::{marginal_residuals, sinkhorn_solve, AssignmentInstance, InstanceFile};
use crate::params::ParamSet;
use crate::sac::SacConfig;

pub const USAGE: &str = "\
usage: sac <command> [--config FILE] [--key value ...]

commands:
  synth       generate a synthetic dataset            (--out DIR)
  train       train a localizer                       (--data DIR, --out DIR)
  eval        score a checkpoint or a detection file  (--checkpoint FILE | --detections FILE)
  sinkhorn    solve one transport instance            (--instance FILE)
  gradcheck   finite-difference gradient suites
  ttest       Student's t-test of two score columns   (--a FILE --b FILE)
  experiment  train and score every mode x seed cell  (--out DIR)

Any configuration key may be given as a flag, e.g. --sinkhorn.epsilon 0.01.
Shorthands: --seed, --mode, --epochs.";

pub const COMMANDS: &[&str] = &["synth", "train", "eval", "sinkhorn", "gradcheck", "ttest", "experiment"];

/// Run the CLI and return the process exit status.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                eprintln!("{USAGE}");
            }
            e.exit_code()
        }
    }
}

fn resolve_key(command: &str, flag: &str) -> String {
    match (command, flag) {
        ("synth", "seed") => "synth.seed".into(),
        (_, "seed") => "localizer.seed".into(),
        (_, "mode") => "localizer.mode".into(),
        (_, "epochs") => "localizer.epochs".into(),
        _ => flag.into(),
    }
}

/// Parse `argv` (without the program name) into a command and merged config.
pub fn parse_args(args: &[String]) -> Result<(String, RunConfig)> {
    let command = args
        .first()
        .ok_or_else(|| Error::Config("missing command".into()))?
        .clone();
    if !COMMANDS.contains(&command.as_str()) {
        return Err(Error::Config(format!("unknown command `{command}`")));
    }
    let mut pairs = Vec::new();
    let mut rest = args[1..].iter();
    while let Some(arg) = rest.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument `{arg}`")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = rest
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        pairs.push((key, value));
    }

    let mut cfg = RunConfig::default();
    for (_, path) in pairs.iter().filter(|(k, _)| k == "config") {
        cfg.apply_file(Path::new(path))?;
    }
    for (key, value) in pairs.iter().filter(|(k, _)| k != "config") {
        let key = resolve_key(&command, key);
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown flag --{key}")));
        }
        cfg.set(&key, value)?;
    }
    cfg.validate()?;
    Ok((command, cfg))
}

pub fn dispatch(args: &[String]) -> Result<()> {
    let (command, cfg) = parse_args(args)?;
    match command.as_str() {
        "synth" => cmd_synth(&cfg),
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg),
        "sinkhorn" => cmd_sinkhorn(&cfg),
        "gradcheck" => cmd_gradcheck(&cfg),
        "ttest" => cmd_ttest(&cfg),
        "experiment" => cmd_experiment(&cfg),
        _ => unreachable!("validated in parse_args"),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required flag --{flag}")))
}

fn out_dir(cfg: &RunConfig, default: &str) -> Result<PathBuf> {
    let dir = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Write `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            let text = serde_json::to_string_pretty(value)?;
            writeln!(std::io::stdout(), "{text}")?;
            Ok(())
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// The dataset named by `--data`, or the configured synthetic one generated in memory.
pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.paths.data {
        Some(dir) => {
            let manifest = if dir.is_dir() { dir.join("manifest.json") } else { dir.clone() };
            datagen::load_dataset(&manifest, Some(cfg.localizer.classes))
        }
        None => datagen::generate(&cfg.synth),
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg, "data")?;
    let manifest = datagen::generate_dataset(&cfg.synth, &dir)?;
    println!("{}", manifest.display());
    Ok(())
}

/// One row of a results table: mAP in percent with two decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub iou: String,
    pub map: String,
}

impl ResultRow {
    pub fn new(method: &str, seed: u64, iou: f64, map: f64) -> Self {
        Self {
            method: method.to_string(),
            seed,
            iou: format!("{iou:.2}"),
            map: format!("{:.2}", map * 100.0),
        }
    }

    pub fn map_value(&self) -> Result<f64> {
        self.map
            .parse()
            .map_err(|_| Error::Format(format!("bad map value `{}`", self.map)))
    }
}

fn result_rows(method: &str, seed: u64, cfg: &RunConfig, dets: &[Detection], gts: &[GroundTruth]) -> Vec<ResultRow> {
    cfg.eval
        .iou_thresholds
        .iter()
        .map(|&t| {
            let map = crate::metrics::evaluate_map(dets, gts, cfg.localizer.classes, t, cfg.eval.ap_mode);
            ResultRow::new(method, seed, t, map)
        })
        .collect()
}

fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    write_csv(path, log)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dataset = dataset_for(cfg)?;
    let dir = out_dir(cfg, "run")?;
    let outcome = localizer::train(&dataset, &cfg.localizer)?;
    outcome.params.write_checkpoint(&dir.join("checkpoint.bin"))?;
    write_loss_log(&dir.join("loss_log.csv"), &outcome.log)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    println!("{}", dir.join("checkpoint.bin").display());
    Ok(())
}

fn test_ground_truth(dataset: &Dataset) -> Vec<GroundTruth> {
    dataset.split(Split::Test).flat_map(|v| v.ground_truth()).collect()
}

/// Mean modality attention over test videos, grouped by the preferred modality of their class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRow {
    pub method: String,
    pub seed: u64,
    pub preference: String,
    pub videos: usize,
    pub appearance: f64,
    pub motion: f64,
}

fn modality_rows(
    dataset: &Dataset,
    preference: &[Modality],
    params: &ParamSet,
    cfg: &LocalizerConfig,
) -> Result<Vec<ModalityRow>> {
    let mut acc: BTreeMap<&'static str, (usize, f64, f64)> = BTreeMap::new();
    for v in dataset.split(Split::Test) {
        let Some(label) = v.label() else { continue };
        let Some(pref) = preference.get(label - 1) else { continue };
        if let Some(m) = localizer::predict(params, &v.features, cfg)?.modality {
            let e = acc.entry(pref.as_str()).or_default();
            e.0 += 1;
            e.1 += m[0];
            e.2 += m[1];
        }
    }
    Ok(acc
        .into_iter()
        .map(|(pref, (n, a, m))| ModalityRow {
            method: cfg.mode.to_string(),
            seed: cfg.seed,
            preference: pref.to_string(),
            videos: n,
            appearance: a / n as f64,
            motion: m / n as f64,
        })
        .collect())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg, "eval")?;
    let l = &cfg.localizer;
    if let Some(path) = &cfg.paths.detections {
        let dets: Vec<Detection> = serde_json::from_str(&fs::read_to_string(path)?)?;
        let gts: Vec<GroundTruth> = match &cfg.paths.annotations {
            Some(a) => serde_json::from_str(&fs::read_to_string(a)?)?,
            None => test_ground_truth(&dataset_for(cfg)?),
        };
        return write_csv(&dir.join("results.csv"), &result_rows(l.mode.as_str(), l.seed, cfg, &dets, &gts));
    }
    let dataset = dataset_for(cfg)?;
    let params = ParamSet::read_checkpoint(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let dets = localizer::detect(&dataset, Split::Test, &params, l)?;
    write_json(&dir.join("detections.json"), &dets)?;
    let gts = test_ground_truth(&dataset);
    write_csv(&dir.join("results.csv"), &result_rows(l.mode.as_str(), l.seed, cfg, &dets, &gts))?;
    let rows = modality_rows(&dataset, &cfg.synth.preference, &params, l)?;
    if !rows.is_empty() {
        write_csv(&dir.join("modality.csv"), &rows)?;
    }
    Ok(())
}

/// Transport solver output with marginal residuals.
#[derive(Clone, Debug, Serialize)]
pub struct SinkhornReport {
    pub plan: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub row_residual: f64,
    pub col_residual: f64,
}

fn cmd_sinkhorn(cfg: &RunConfig) -> Result<()> {
    let path = required(&cfg.paths.instance, "instance")?;
    let file: InstanceFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let inst = AssignmentInstance::from_file(&file)?;
    let r = sinkhorn_solve(&inst, &cfg.localizer.sac.sinkhorn)?;
    let (row_residual, col_residual) = marginal_residuals(&r.plan_tensor(), &inst);
    let report = SinkhornReport {
        plan: r.plan,
        u: r.u,
        v: r.v,
        loss: r.loss,
        iterations: r.iterations,
        row_residual,
        col_residual,
    };
    emit_json(cfg.paths.out.as_deref(), &report)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub step: f64,
    pub tolerance: f64,
    pub transport: GradCheckReport,
    pub attention: GradCheckReport,
    pub pass: bool,
}

/// Transport and attention suites over `seeds` seeds with plain `f64` differences.
pub fn gradcheck_suites(seeds: u64, sinkhorn: &crate::ot::SinkhornConfig) -> Result<GradCheckSummary> {
    let mut transport = GradCheckReport::default();
    let mut attention = GradCheckReport::default();
    let sac_cfg = SacConfig {
        embed_width: 4,
        sinkhorn: *sinkhorn,
        ..Default::default()
    };
    for seed in 0..seeds {
        let frames = [4, 8, 16][seed as usize % 3];
        transport.merge(gradcheck::ot_suite(seed, frames, sinkhorn, DEFAULT_STEP)?);
        attention.merge(gradcheck::sac_suite(seed, 3, 12, &sac_cfg, DEFAULT_STEP)?);
    }
    let pass = transport.passes(DEFAULT_TOLERANCE) && attention.passes(DEFAULT_TOLERANCE);
    Ok(GradCheckSummary {
        step: DEFAULT_STEP,
        tolerance: DEFAULT_TOLERANCE,
        transport,
        attention,
        pass,
    })
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let summary = gradcheck_suites(cfg.seeds.len() as u64, &cfg.localizer.sac.sinkhorn)?;
    emit_json(cfg.paths.out.as_deref(), &summary)?;
    if summary.pass {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed: transport {:.3e}, attention {:.3e}",
            summary.transport.max_rel_error, summary.attention.max_rel_error
        )))
    }
}

/// Scores from a CSV: the `map` column if the header has one, otherwise the first column.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_error)?;
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>().map_err(csv_error)?;
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let header = first.iter().any(|f| f.trim().parse::<f64>().is_err());
    let column = if header {
        first.iter().position(|f| f.trim() == "map").unwrap_or(0)
    } else {
        0
    };
    records
        .iter()
        .skip(usize::from(header))
        .map(|r| {
            let field = r.get(column).unwrap_or("").trim();
            field
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad score `{field}`", path.display())))
        })
        .collect()
}

fn cmd_ttest(cfg: &RunConfig) -> Result<()> {
    let a = read_scores(required(&cfg.paths.a, "a")?)?;
    let b = read_scores(required(&cfg.paths.b, "b")?)?;
    emit_json(cfg.paths.out.as_deref(), &students_t(&a, &b)?)
}

/// Outcome of one `(mode, seed)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub mode: AttentionMode,
    pub seed: u64,
    pub rows: Vec<ResultRow>,
    pub modality: Vec<ModalityRow>,
    pub log: Vec<EpochLog>,
}

pub fn run_cell(cfg: &RunConfig, dataset: &Dataset, mode: AttentionMode, seed: u64) -> Result<CellResult> {
    let lc = LocalizerConfig {
        mode,
        seed,
        ..cfg.localizer.clone()
    };
    let outcome = localizer::train(dataset, &lc)?;
    let dets = localizer::detect(dataset, Split::Test, &outcome.params, &lc)?;
    let rows = result_rows(mode.as_str(), seed, cfg, &dets, &test_ground_truth(dataset));
    let modality = modality_rows(dataset, &cfg.synth.preference, &outcome.params, &lc)?;
    Ok(CellResult {
        mode,
        seed,
        rows,
        modality,
        log: outcome.log,
    })
}

/// Worker count for the experiment: `SAC_THREADS` if set, else the machine's parallelism.
pub fn cell_threads() -> Result<usize> {
    match std::env::var("SAC_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("SAC_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    /// `sac` versus `none` at each IoU threshold, when both modes ran.
    pub ttests: BTreeMap<String, TTestReport>,
}

impl ExperimentReport {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.cells.iter().flat_map(|c| c.rows.iter().cloned()).collect()
    }

    /// Reported scores of `mode` at `iou` in seed order.
    pub fn scores(&self, mode: AttentionMode, iou: &str) -> Result<Vec<f64>> {
        self.cells
            .iter()
            .filter(|c| c.mode == mode)
            .flat_map(|c| c.rows.iter().filter(|r| r.iou == iou))
            .map(ResultRow::map_value)
            .collect()
    }
}

/// Train and score every `(mode, seed)` cell, then compare `sac` with `none`.
///
/// Cells run on up to `threads` workers; results are assembled in mode-major,
/// seed-minor order whatever the scheduling.
pub fn experiment_matrix(cfg: &RunConfig, dataset: &Dataset, threads: usize) -> Result<ExperimentReport> {
    let jobs: Vec<(AttentionMode, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let workers = threads.clamp(1, jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<CellResult>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(&(mode, seed)) = jobs.get(i) else { break };
                        done.push((i, run_cell(cfg, dataset, mode, seed)));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("experiment worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let cells = slots
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;

    let mut report = ExperimentReport {
        cells,
        ttests: BTreeMap::new(),
    };
    if cfg.modes.contains(&AttentionMode::Sac) && cfg.modes.contains(&AttentionMode::None) && cfg.seeds.len() >= 2 {
        for &t in &cfg.eval.iou_thresholds {
            let iou = format!("{t:.2}");
            let sac = report.scores(AttentionMode::Sac, &iou)?;
            let none = report.scores(AttentionMode::None, &iou)?;
            report.ttests.insert(iou, students_t(&sac, &none)?);
        }
    }
    Ok(report)
}

pub fn write_experiment(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("logs"))?;
    write_csv(&dir.join("results.csv"), &report.rows())?;
    let modality: Vec<ModalityRow> = report.cells.iter().flat_map(|c| c.modality.iter().cloned()).collect();
    write_csv(&dir.join("modality.csv"), &modality)?;
    for c in &report.cells {
        write_loss_log(&dir.join("logs").join(format!("{}_{}.csv", c.mode, c.seed)), &c.log)?;
    }
    for (iou, t) in &report.ttests {
        write_json(&dir.join(format!("ttest_{iou}.json")), t)?;
    }
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig) -> Result<()> {
    let dataset = dataset_for(cfg)?;
    let dir = out_dir(cfg, "experiment")?;
    let report = experiment_matrix(cfg, &dataset, cell_threads()?)?;
    write_experiment(&report, &dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    println!("{}", dir.join("results.csv").display());
    Ok(())
}
