use std::fmt;
use std::path::{Path, PathBuf};

use gobl_core::eval::{
    emit_report, evaluate, render_report, write_predictions, EvalError, EvalReport, Protocol, ReportFormat,
};
use gobl_core::gobl::{
    finetune_gobl, load_checkpoint, pretrain_positive, save_checkpoint, GoblError, Phase, TrainConfig,
};
use gobl_core::losses::gradient_suite;
use gobl_core::model::{init_registry, ModelConfig};
use gobl_core::synthdata::{
    dataset_stats, emit_prompt, filter_single_annotation, generate_manifest, parse_mllm_response,
    serialize_descriptions, split, DataError, DatasetManifest, NegationLexicon, SceneConfig,
};
use serde_json::{json, Value};

use crate::{logging, Cmd, Common};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.goblckpt";
pub const TRAIN_LOG: &str = "train.log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const EFFECTIVE_CONFIG: &str = "effective-config.json";
pub const RUN_LOG: &str = "run.log";
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<GoblError> for CliError {
    fn from(e: GoblError) -> Self {
        match e {
            GoblError::Config(_) => CliError::Usage(e.to_string()),
            GoblError::Divergence { .. } | GoblError::FrozenViolation(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Protocol(_) => CliError::Usage(e.to_string()),
            EvalError::Checkpoint(g) => g.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Config file, then `--seed`, then `KEY=VALUE` overrides.
fn train_config(common: &Common, phase: Option<Phase>) -> Result<TrainConfig, CliError> {
    let text = match &common.config {
        Some(p) => read_file(p)?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Some(p) = phase {
        overrides.push(("phase".to_string(), p.as_str().to_string()));
    }
    if let Some(s) = common.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {kv:?} is not KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(TrainConfig::parse(&text, &overrides)?)
}

struct Run {
    out: PathBuf,
    config: TrainConfig,
}

impl Run {
    fn start(name: &str, common: &Common, phase: Option<Phase>, extra: Value) -> Result<Self, CliError> {
        let config = train_config(common, phase)?;
        std::fs::create_dir_all(&common.out).map_err(|e| io_err(&common.out, e))?;
        logging::init(&common.out.join(RUN_LOG)).map_err(|e| io_err(&common.out.join(RUN_LOG), e))?;
        let effective = json!({
            "subcommand": name,
            "config": config,
            "args": extra,
        });
        write_file(&common.out.join(EFFECTIVE_CONFIG), pretty(&effective))?;
        log::info!("gobl {name}: writing to {}", common.out.display());
        Ok(Self {
            out: common.out.clone(),
            config,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest_path(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone()
            .or_else(|| self.config.manifest_path.clone())
            .unwrap_or_else(|| self.path(MANIFEST))
    }
}

fn load_manifest(path: &Path, lexicon: &NegationLexicon) -> Result<DatasetManifest, CliError> {
    let m = DatasetManifest::load(path, lexicon)?;
    log::info!("loaded {} entries from {}", m.len(), path.display());
    Ok(m)
}

fn images_of(manifest: &DatasetManifest, path: &Path) -> Result<Vec<gobl_core::diffcore::NdArray>, CliError> {
    Ok(manifest.load_images(path.parent())?)
}

pub fn run(cmd: Cmd) -> Result<(), CliError> {
    let lexicon = NegationLexicon::default();
    match cmd {
        Cmd::SynthGen { common, count } => {
            let run = Run::start("synth-gen", &common, None, json!({ "count": count }))?;
            let m = generate_manifest(run.config.seed, count, &SceneConfig::default())?;
            m.save(&run.path(MANIFEST))?;
            log::info!("wrote {count} scenes (seed {})", run.config.seed);
        }
        Cmd::CocoFilter { common, input } => {
            let run = Run::start("coco-filter", &common, None, json!({ "input": input }))?;
            let res = filter_single_annotation(&read_file(&input)?)?;
            log::info!("kept {} images, excluded {}", res.kept.len(), res.excluded.len());
            write_file(&run.path("coco_filtered.json"), pretty(&res))?;
        }
        Cmd::PromptEmit { common, manifest } => {
            let run = Run::start("prompt-emit", &common, None, json!({ "manifest": manifest }))?;
            let path = run.manifest_path(&manifest);
            let m = load_manifest(&path, &lexicon)?;
            let mut lines = String::new();
            for e in &m.entries {
                let image_ref = e.image_file.clone().unwrap_or_else(|| e.image_id.clone());
                let prompt = emit_prompt(&image_ref, e.bbox, &e.category);
                lines.push_str(&json!({ "image_id": e.image_id, "prompt": prompt }).to_string());
                lines.push('\n');
            }
            write_file(&run.path("prompts.jsonl"), lines)?;
        }
        Cmd::ParseMllm { common, input } => {
            let run = Run::start("parse-mllm", &common, None, json!({ "input": input }))?;
            match parse_mllm_response(&read_file(&input)?, &lexicon) {
                Ok(d) => write_file(&run.path("descriptions.json"), serialize_descriptions(&d))?,
                Err(errs) => {
                    let listed: Vec<String> = errs.iter().map(|e| e.to_string()).collect();
                    for e in &listed {
                        log::error!("{e}");
                    }
                    write_file(&run.path("violations.json"), pretty(&listed))?;
                    return Err(CliError::Data(format!(
                        "{} violation(s) in {}",
                        listed.len(),
                        input.display()
                    )));
                }
            }
        }
        Cmd::Stats { common, manifest } => {
            let run = Run::start("stats", &common, None, json!({ "manifest": manifest }))?;
            let m = load_manifest(&run.manifest_path(&manifest), &lexicon)?;
            write_file(&run.path("stats.json"), pretty(&dataset_stats(&m, &lexicon)))?;
        }
        Cmd::Split {
            common,
            manifest,
            test_fraction,
        } => {
            let run = Run::start(
                "split",
                &common,
                None,
                json!({ "manifest": manifest, "test_fraction": test_fraction }),
            )?;
            let m = load_manifest(&run.manifest_path(&manifest), &lexicon)?;
            let (train, test) = split(&m, test_fraction, run.config.seed)?;
            log::info!("train {} / test {}", train.len(), test.len());
            train.save(&run.path("train_manifest.json"))?;
            test.save(&run.path("test_manifest.json"))?;
        }
        Cmd::Pretrain { common } => {
            let run = Run::start("pretrain", &common, Some(Phase::Pretrain), json!({}))?;
            let cfg = &run.config;
            let path = run.manifest_path(&None);
            let m = load_manifest(&path, &lexicon)?;
            let images = images_of(&m, &path)?;
            let model = ModelConfig::default();
            let registry = init_registry(&model, cfg.seed).map_err(|e| CliError::Data(e.to_string()))?;
            let mut log_file = create_log(&run)?;
            let (ckpt, stats) = pretrain_positive(registry, &model, &m, &images, cfg, Some(&mut log_file))?;
            log::info!(
                "pretrain done: {} steps, final epoch loss {:.6}",
                stats.steps,
                stats.final_epoch_loss
            );
            save_checkpoint(
                &cfg.checkpoint_out.clone().unwrap_or_else(|| run.path(CHECKPOINT)),
                &ckpt,
            )?;
        }
        Cmd::Finetune { common } => {
            let run = Run::start("finetune", &common, Some(Phase::Gobl), json!({}))?;
            let cfg = &run.config;
            let ckpt_in = cfg.checkpoint_in.clone().unwrap_or_else(|| run.path(CHECKPOINT));
            if !ckpt_in.exists() {
                return Err(CliError::Data(format!(
                    "pretrained checkpoint {} not found",
                    ckpt_in.display()
                )));
            }
            let pretrained = load_checkpoint(&ckpt_in)?;
            let path = run.manifest_path(&None);
            let m = load_manifest(&path, &lexicon)?;
            let images = images_of(&m, &path)?;
            log::info!(
                "trainable share {:.4} with tags {:?}",
                {
                    let mut r = pretrained.registry.clone();
                    r.freeze_except(&cfg.freeze_tags)
                        .map_err(|e| CliError::Usage(e.to_string()))?;
                    r.trainable_share()
                },
                cfg.freeze_tags
            );
            let mut log_file = create_log(&run)?;
            let (ckpt, stats) = finetune_gobl(&pretrained, &m, &images, cfg, &lexicon, Some(&mut log_file))?;
            log::info!("finetune done: {} groups, {} steps", stats.groups, stats.steps);
            save_checkpoint(
                &cfg.checkpoint_out.clone().unwrap_or_else(|| run.path(CHECKPOINT)),
                &ckpt,
            )?;
        }
        Cmd::Eval {
            common,
            protocol,
            format,
            top_k,
        } => {
            let run = Run::start(
                "eval",
                &common,
                None,
                json!({ "protocol": protocol, "format": format, "top_k": top_k }),
            )?;
            let protocol: Protocol = protocol
                .parse()
                .map_err(|e: EvalError| CliError::Usage(e.to_string()))?;
            let formats = parse_formats(&format)?;
            if top_k == 0 {
                return Err(CliError::Usage("--top-k must be at least 1".into()));
            }
            let ckpt = load_checkpoint(&run.config.checkpoint_in.clone().unwrap_or_else(|| run.path(CHECKPOINT)))?;
            let path = run.manifest_path(&None);
            let m = load_manifest(&path, &lexicon)?;
            let images = images_of(&m, &path)?;
            let (report, preds) = evaluate(&ckpt, &m, &images, protocol, &lexicon, top_k)?;
            log::info!(
                "{protocol}: full {:.4} presence {:.4} absence {:.4}",
                report.map_full,
                report.map_presence,
                report.map_absence
            );
            write_predictions(&run.path(PREDICTIONS), &preds)?;
            write_reports(&run, &report, &formats)?;
        }
        Cmd::Gradcheck { common, instances } => {
            let run = Run::start("gradcheck", &common, None, json!({ "instances": instances }))?;
            let checks = gradient_suite(run.config.seed, instances, GRADCHECK_STEP)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            for c in &checks {
                println!("{:<6} max relative error {:.3e}", c.term, c.max_rel_error);
            }
            write_file(&run.path("gradcheck.json"), pretty(&checks))?;
            let failed: Vec<&str> = checks
                .iter()
                .filter(|c| !(c.max_rel_error <= GRADCHECK_TOLERANCE))
                .map(|c| c.term.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(CliError::Numerical(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
        }
        Cmd::Report { common, input, format } => {
            let run = Run::start("report", &common, None, json!({ "input": input, "format": format }))?;
            let formats = parse_formats(&format)?;
            let report: EvalReport = serde_json::from_str(&read_file(&input)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
            write_reports(&run, &report, &formats)?;
        }
    }
    Ok(())
}

fn create_log(run: &Run) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    let path = run.config.log_path.clone().unwrap_or_else(|| run.path(TRAIN_LOG));
    let f = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn parse_formats(s: &str) -> Result<Vec<ReportFormat>, CliError> {
    match s {
        "both" => Ok(vec![ReportFormat::Json, ReportFormat::Markdown]),
        other => Ok(vec![other
            .parse()
            .map_err(|e: EvalError| CliError::Usage(e.to_string()))?]),
    }
}

fn write_reports(run: &Run, report: &EvalReport, formats: &[ReportFormat]) -> Result<(), CliError> {
    for &f in formats {
        let name = match f {
            ReportFormat::Json => REPORT_JSON,
            ReportFormat::Markdown => REPORT_MD,
        };
        emit_report(report, f, &run.path(name))?;
        if f == ReportFormat::Markdown {
            print!("{}", render_report(report, f));
        }
    }
    Ok(())
}
