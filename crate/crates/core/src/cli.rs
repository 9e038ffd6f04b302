//! Command-line front end: `train`, `eval`, `cross-eval`, `localize`,
//! `synth-gen` and `inspect-afss`.
//!
//! Exit status is 0 on success, 1 on I/O or runtime failures and 2 on usage
//! or configuration errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::afss::SelectionMode;
use crate::backbone::Level;
use crate::checkpoint;
use crate::datamodel::{
    generate_synthetic, load_manifest, load_schema, save_manifest, AttributeSchema, Split,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::localization::{localize_with_heatmaps, render_overlay};
use crate::metrics::{iou, LocalizationReport};
use crate::ple::PleVariant;
use crate::trainer::{self, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "sspnet", version, about = "Pedestrian attribute recognition with scale and spatial priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to run on; defaults to the `test` entry of `--config`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<PleVariant>,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Evaluate on a dataset with another schema through an attribute map.
    CrossEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Schema of the target manifest.
        #[arg(long)]
        schema: PathBuf,
        /// JSON object mapping model attribute names to target names.
        #[arg(long)]
        map: PathBuf,
    },
    /// Attribute heatmaps, boxes and overlays.
    Localize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long, conflicts_with = "tau_sweep")]
        tau: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        tau_sweep: Option<Vec<f64>>,
        /// Write overlays for at most this many images.
        #[arg(long)]
        max_overlays: Option<usize>,
    },
    /// Generate a synthetic dataset.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Print the scale-selection table of a checkpoint.
    InspectAfss {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Datasets and training settings for `train`. Paths are relative to the
/// config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Attribute schema; PA-100K when absent.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub train_config: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.schema, &mut cfg.train, &mut cfg.val, &mut cfg.test]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_schema(&self) -> Result<AttributeSchema> {
        match &self.schema {
            Some(p) => load_schema(p),
            None => Ok(AttributeSchema::pa100k()),
        }
    }
}

/// `synth-gen` settings: the spec plus how many samples go to validation and
/// test; the rest is training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGenConfig {
    pub spec: SyntheticSpec,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthGenConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::standard(3000),
            val: 500,
            test: 500,
            seed: 0,
        }
    }
}

/// Sets a dotted `key` inside a JSON tree. The key must already exist; the
/// value is read as JSON when it parses, otherwise as a string.
pub fn set_json_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Validation(format!("unknown config key {key:?}")))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn split_kv(kv: &str) -> Result<(&str, &str)> {
    kv.split_once('=')
        .ok_or_else(|| Error::Validation(format!("override {kv:?} is not KEY=VALUE")))
}

fn apply_overrides<T: Serialize + for<'de> Deserialize<'de>>(value: &T, sets: &[String]) -> Result<T> {
    let mut json = serde_json::to_value(value).expect("config serializes");
    for kv in sets {
        let (k, v) = split_kv(kv)?;
        set_json_path(&mut json, k, v)?;
    }
    serde_json::from_value(json).map_err(|e| Error::Validation(format!("bad override: {e}")))
}

/// Overrides that may be applied to a trained model: anything that leaves
/// the architecture alone.
fn override_trained(config: &TrainConfig, common: &Common) -> Result<TrainConfig> {
    let mut out = config.clone();
    for kv in &common.set {
        let (k, v) = split_kv(kv)?;
        out.apply_override(k, v)?;
    }
    if out.model_config() != config.model_config() {
        return Err(Error::Validation(
            "overrides cannot change the architecture of a trained model".into(),
        ));
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn data_path(source: &Source, common: &Common) -> Result<PathBuf> {
    if let Some(p) = &source.data {
        return Ok(p.clone());
    }
    let cfg = match &common.config {
        Some(c) => RunConfig::load(c)?,
        None => return Err(Error::Validation("no --data given and no --config to read it from".into())),
    };
    cfg.test
        .ok_or_else(|| Error::Validation("config has no test manifest; pass --data".into()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path)
}

fn cmd_train(common: &Common, variant: Option<PleVariant>) -> Result<()> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = apply_overrides(&run.train_config, &common.set)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    run.train_config = cfg.clone();
    let train_path = run
        .train
        .clone()
        .ok_or_else(|| Error::Validation("config names no train manifest".into()))?;
    let val_path = run
        .val
        .clone()
        .ok_or_else(|| Error::Validation("config names no val manifest".into()))?;
    let schema = run.load_schema()?;
    let train = load_manifest(&train_path, &schema)?;
    let val = load_manifest(&val_path, &schema)?;

    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    write_json(&common.out.join("config.json"), &run)?;
    let log_path = common.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_err = None;
    let ck = trainer::train_with(&cfg, &train, &val, |line| {
        let text = serde_json::to_string(line).expect("log serializes");
        if let Err(e) = writeln!(log, "{text}") {
            log_err.get_or_insert(e);
        }
        let val = line
            .val_mean_ma
            .map(|v| format!(" val mA {:.2}", 100.0 * v))
            .unwrap_or_default();
        eprintln!("epoch {:>3} {:?} loss {:.4}{val}", line.epoch, line.phase, line.total_loss);
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    let ck_path = common.out.join("checkpoint.sspnet");
    checkpoint::save(&ck, &ck_path)?;
    if let Some(sel) = ck.model.selection.frozen() {
        let parts: Vec<String> = sel.iter().map(|(u, l)| format!("{u}={l}")).collect();
        eprintln!("selected levels: {}", parts.join(" "));
    }
    if let Some(test_path) = &run.test {
        let test = load_manifest(test_path, &schema)?;
        let report = trainer::evaluate(&ck.model, &test, cfg.threshold)?;
        write_json(
            &common.out.join("eval_report.json"),
            &json!({ "config": run, "data": test_path, "report": report }),
        )?;
        print!("{}", report.to_table());
    }
    eprintln!("checkpoint written to {}", ck_path.display());
    Ok(())
}

fn cmd_eval(common: &Common, source: &Source) -> Result<()> {
    let ck = load_checkpoint(&source.checkpoint)?;
    let cfg = override_trained(&ck.config, common)?;
    let path = data_path(source, common)?;
    let data = load_manifest(&path, &ck.model.schema)?;
    let report = trainer::evaluate(&ck.model, &data, cfg.threshold)?;
    let table = report.to_table();
    write_json(
        &common.out.join("eval_report.json"),
        &json!({ "config": cfg, "checkpoint": source.checkpoint, "data": path, "report": report }),
    )?;
    write_file(&common.out.join("eval_report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

/// Reads a `{"model attribute": "target attribute"}` map into index pairs.
pub fn load_attribute_map(
    path: &Path,
    source: &AttributeSchema,
    target: &AttributeSchema,
) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: IndexMap<String, String> = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    map.iter()
        .map(|(s, t)| {
            let si = source
                .attribute_index(s)
                .ok_or_else(|| Error::Validation(format!("model has no attribute {s:?}")))?;
            let ti = target
                .attribute_index(t)
                .ok_or_else(|| Error::Validation(format!("target schema has no attribute {t:?}")))?;
            Ok((si, ti))
        })
        .collect()
}

fn cmd_cross_eval(common: &Common, source: &Source, schema: &Path, map: &Path) -> Result<()> {
    let ck = load_checkpoint(&source.checkpoint)?;
    let cfg = override_trained(&ck.config, common)?;
    let target_schema = load_schema(schema)?;
    let pairs = load_attribute_map(map, &ck.model.schema, &target_schema)?;
    let path = data_path(source, common)?;
    let data = load_manifest(&path, &target_schema)?;
    let report = trainer::cross_dataset_eval(&ck.model, &data, &pairs)?;
    let table = report.to_table();
    write_json(
        &common.out.join("cross_eval_report.json"),
        &json!({ "config": cfg, "checkpoint": source.checkpoint, "data": path, "map": map, "report": report }),
    )?;
    write_file(&common.out.join("cross_eval_report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct ImageLocalization<'a> {
    index: usize,
    taus: Vec<TauResult<'a>>,
}

#[derive(Serialize)]
struct TauResult<'a> {
    tau: f64,
    attributes: IndexMap<&'a str, crate::localization::Localization>,
}

fn cmd_localize(
    common: &Common,
    source: &Source,
    tau: Option<f64>,
    sweep: Option<&[f64]>,
    max_overlays: Option<usize>,
) -> Result<()> {
    let ck = load_checkpoint(&source.checkpoint)?;
    let mut cfg = override_trained(&ck.config, common)?;
    if let Some(t) = tau {
        cfg.tau = t;
    }
    let taus: Vec<f64> = sweep.map(<[f64]>::to_vec).unwrap_or_else(|| vec![cfg.tau]);
    if taus.is_empty() || taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Validation("thresholds must lie in [0, 1]".into()));
    }
    let path = data_path(source, common)?;
    let data = load_manifest(&path, &ck.model.schema)?;
    if data.is_empty() {
        return Err(Error::Empty(format!("{} has no samples", path.display())));
    }
    let model = &ck.model;
    let names = &model.schema.attributes;
    let with_boxes = data.has_boxes();
    let probs = if with_boxes {
        None
    } else {
        Some(model.predict_dataset(&data, 32)?)
    };
    let dir = common.out.join("localize");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut pairs = vec![vec![Vec::new(); names.len()]; taus.len()];
    for (i, sample) in data.samples.iter().enumerate() {
        // Scored attributes when boxes exist, predicted ones otherwise.
        let attrs: Vec<usize> = match &probs {
            None => sample
                .gt_boxes
                .keys()
                .copied()
                .filter(|&j| sample.labels[j] == 1)
                .collect(),
            Some(p) => (0..names.len()).filter(|&j| p[[i, j]] >= cfg.threshold).collect(),
        };
        let (maps, located) = localize_with_heatmaps(model, sample, &attrs, &taus)?;
        if max_overlays.map_or(true, |m| i < m) {
            for h in &maps {
                let bbox = located[0][&h.attribute].bbox;
                let img = render_overlay(&sample.image.view(), &h.upsampled.view(), bbox);
                let p = dir.join(format!("{i:05}_{}.png", names[h.attribute]));
                img.save(&p).map_err(|e| Error::Load {
                    path: p.clone(),
                    reason: e.to_string(),
                })?;
            }
        }
        for (t, per_attr) in located.iter().enumerate() {
            for (&j, loc) in per_attr {
                if let Some(gt) = sample.gt_boxes.get(&j) {
                    pairs[t][j].push((loc.confidence, loc.bbox.map_or(0.0, |b| iou(&b, gt))));
                }
            }
        }
        let record = ImageLocalization {
            index: i,
            taus: taus
                .iter()
                .zip(&located)
                .map(|(&tau, per_attr)| TauResult {
                    tau,
                    attributes: per_attr.iter().map(|(&j, l)| (names[j].as_str(), *l)).collect(),
                })
                .collect(),
        };
        write_json(&dir.join(format!("{i:05}.json")), &record)?;
    }
    if with_boxes {
        let reports: Vec<LocalizationReport> = taus
            .iter()
            .zip(&pairs)
            .map(|(&tau, p)| LocalizationReport::from_pairs(names, p, tau))
            .collect();
        let table: String = reports
            .iter()
            .map(LocalizationReport::to_table)
            .collect::<Vec<_>>()
            .join("\n");
        write_json(
            &common.out.join("localization_report.json"),
            &json!({ "config": cfg, "checkpoint": source.checkpoint, "data": path, "reports": reports }),
        )?;
        write_file(&common.out.join("localization_report.txt"), table.as_bytes())?;
        print!("{table}");
    } else {
        eprintln!("no ground-truth boxes: wrote overlays and boxes only");
    }
    Ok(())
}

fn cmd_synth_gen(common: &Common) -> Result<()> {
    let base = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?
        }
        None => SynthGenConfig::default(),
    };
    let mut cfg: SynthGenConfig = apply_overrides(&base, &common.set)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let schema = cfg.spec.validate()?;
    let n = cfg.spec.num_samples;
    if cfg.val + cfg.test >= n {
        return Err(Error::Validation(format!(
            "val ({}) + test ({}) leave no training samples out of {n}",
            cfg.val, cfg.test
        )));
    }
    let data = generate_synthetic(&cfg.spec, cfg.seed)?;
    let (train, rest) = data.split_at(n - cfg.val - cfg.test, Split::Train, Split::Val);
    let (val, test) = rest.split_at(cfg.val, Split::Val, Split::Test);
    let out = &common.out;
    for (set, name) in [(&train, "train.jsonl"), (&val, "val.jsonl"), (&test, "test.jsonl")] {
        if !set.is_empty() {
            save_manifest(set, out, name)?;
        }
    }
    write_file(&out.join("schema.json"), schema.to_json().as_bytes())?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    let run = RunConfig {
        schema: Some("schema.json".into()),
        train: Some("train.jsonl".into()),
        val: (!val.is_empty()).then(|| "val.jsonl".into()),
        test: (!test.is_empty()).then(|| "test.jsonl".into()),
        train_config: TrainConfig::default(),
    };
    write_json(&out.join("run.json"), &run)?;
    eprintln!(
        "wrote {} train, {} val, {} test samples to {}",
        train.len(),
        val.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

/// Table of running validation mA per unit and level, the chosen level
/// marked with `*`.
pub fn afss_table(ck: &Checkpoint) -> String {
    use std::fmt::Write as _;
    let sel = &ck.model.selection;
    let mut s = String::new();
    let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8}   {}", "Unit", "P1", "P2", "P3", "Chosen");
    let units: Vec<String> = sel.units().map(str::to_string).collect();
    for unit in units {
        let chosen = sel.frozen().and_then(|f| f.get(&unit).copied());
        let cells: Vec<String> = Level::ALL
            .iter()
            .map(|&l| {
                let v = sel
                    .stat(&unit, l)
                    .map(|v| format!("{:.2}", 100.0 * v))
                    .unwrap_or_else(|| "n/a".into());
                if chosen == Some(l) {
                    format!("{v}*")
                } else {
                    v
                }
            })
            .collect();
        let chosen = chosen.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>8} {:>8}   {}",
            unit, cells[0], cells[1], cells[2], chosen
        );
    }
    s
}

fn cmd_inspect_afss(path: &Path) -> Result<()> {
    let ck = load_checkpoint(path)?;
    if ck.model.selection.mode() == SelectionMode::Searching {
        eprintln!("warning: scale search has not been frozen; showing running estimates");
    }
    print!("{}", afss_table(&ck));
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { common, variant } => cmd_train(common, *variant),
        Command::Eval { common, source } => cmd_eval(common, source),
        Command::CrossEval {
            common,
            source,
            schema,
            map,
        } => cmd_cross_eval(common, source, schema, map),
        Command::Localize {
            common,
            source,
            tau,
            tau_sweep,
            max_overlays,
        } => cmd_localize(common, source, *tau, tau_sweep.as_deref(), *max_overlays),
        Command::SynthGen { common } => cmd_synth_gen(common),
        Command::InspectAfss { checkpoint } => cmd_inspect_afss(checkpoint),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
