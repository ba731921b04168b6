use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use symfuse::data::{synth_dataset, write_classes, write_tile};
use symfuse::model::Model;
use symfuse::train::{
    evaluate, load_dataset, robustness, train, AblationVariant, AbortSnapshot, EpochRecord, EvalSettings, StepRecord,
    TrainEvent,
};
use symfuse::{EvalMode, ParamCounts, Preset, RobustnessReport, RunConfig, RunSummary};

use crate::rundir::create_run_dir;
use crate::tables::{render_ablation, render_robustness, robustness_rows, to_csv, AblationRow};
use crate::{Cli, Command, Failure};

pub(crate) fn dispatch(cli: &Cli, overrides: &[String]) -> Result<(), Failure> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli, overrides)?;
            let outcome = train_run(&cfg, &cli.out)?;
            let t = &outcome.summary.test;
            println!("{}", outcome.dir.display());
            println!("test OA {:.4} mF1 {:.4} mIoU {:.4}", t.oa, t.mf1, t.miou);
            Ok(())
        }
        Command::Eval { checkpoint, mode } => cmd_eval(cli, overrides, checkpoint, (*mode).into()),
        Command::Ablate { variants } => cmd_ablate(cli, overrides, variants),
        Command::Robustness {
            checkpoint,
            paired_seeds,
        } => cmd_robustness(cli, overrides, checkpoint.as_deref(), paired_seeds),
        Command::Params { json } => cmd_params(cli, overrides, *json),
        Command::ExportSynth { dir } => cmd_export_synth(cli, overrides, dir),
    }
}

fn config_failure(e: symfuse::Error) -> Failure {
    Failure::Config(e.to_string())
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(symfuse::Error::io(path, e))
}

/// Preset, config file, dotted overrides, then `--seed`. Every failure here
/// is a configuration error, including an unreadable config file.
fn load_config(cli: &Cli, overrides: &[String]) -> Result<RunConfig, Failure> {
    let preset = Preset::parse(&cli.preset).map_err(config_failure)?;
    let mut cfg = RunConfig::load(preset, cli.config.as_deref(), overrides).map_err(config_failure)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

fn run_dir(out: &Path, name: &str) -> Result<PathBuf, Failure> {
    create_run_dir(out, name).map_err(|e| io_failure(out, e))
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    Abort(&'a AbortSnapshot),
}

/// Line-delimited JSON log; the first write error is kept and reported
/// by [`NdjsonLog::finish`].
struct NdjsonLog {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl NdjsonLog {
    fn create(path: &Path) -> Result<Self, Failure> {
        let file = File::create(path).map_err(|e| io_failure(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            error: None,
        })
    }

    fn write(&mut self, line: &LogLine<'_>) {
        if self.error.is_some() {
            return;
        }
        let text = serde_json::to_string(line).expect("log record serializes");
        if let Err(e) = writeln!(self.out, "{text}") {
            self.error = Some(e);
        }
    }

    fn finish(mut self) -> Result<(), Failure> {
        if let Some(e) = self.error.take() {
            return Err(io_failure(&self.path, e));
        }
        self.out.flush().map_err(|e| io_failure(&self.path, e))
    }
}

fn progress(label: &str, total_epochs: usize, ev: &TrainEvent<'_>) {
    match ev {
        TrainEvent::Epoch(r) => {
            let gates: Vec<String> = r.gate_means.iter().map(|g| format!("{g:.3}")).collect();
            eprintln!(
                "[{label}] epoch {}/{total_epochs} loss {:.4} gates [{}]",
                r.epoch + 1,
                r.mean_loss,
                gates.join(", ")
            );
        }
        TrainEvent::Abort(a) => eprintln!("[{label}] aborted at step {}: {}", a.step, a.reason),
        TrainEvent::Step(_) => {}
    }
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Trains `cfg` and writes `config.snapshot`, `log.ndjson`, `metrics.json`
/// and `checkpoint` into a fresh run directory under `out`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome, Failure> {
    let data = load_dataset(cfg)?;
    let dir = run_dir(out, &cfg.model.name)?;
    write_text(&dir.join("config.snapshot"), &cfg.to_toml())?;
    let mut log = NdjsonLog::create(&dir.join("log.ndjson"))?;
    let epochs = cfg.schedule.epochs;
    let result = train(cfg, &data, &mut |ev| {
        progress(&cfg.model.name, epochs, &ev);
        match ev {
            TrainEvent::Step(r) => log.write(&LogLine::Step(r)),
            TrainEvent::Epoch(r) => log.write(&LogLine::Epoch(r)),
            TrainEvent::Abort(a) => log.write(&LogLine::Abort(a)),
        }
    });
    log.finish()?;
    let (trainer, summary) = result?;
    write_json(&dir.join("metrics.json"), &summary)?;
    trainer.model.save_checkpoint(&dir.join("checkpoint"))?;
    Ok(TrainOutcome { dir, summary })
}

/// The checkpointed model plus the config used to evaluate it: the
/// checkpoint's own config unless `--config` is given, with dotted
/// overrides on top. The seed always comes from the checkpoint because the
/// frozen weights are derived from it.
fn load_checkpoint(cli: &Cli, overrides: &[String], path: &Path) -> Result<(Model, RunConfig), Failure> {
    let model = Model::from_checkpoint(path).map_err(|e| Failure::Config(format!("checkpoint: {e}")))?;
    let seed = model.config.seed;
    if let Some(s) = cli.seed.filter(|&s| s != seed) {
        return Err(Failure::Config(format!(
            "--seed {s} differs from the checkpoint's seed {seed}"
        )));
    }
    let mut cfg = match &cli.config {
        Some(_) => load_config(cli, overrides)?,
        None => model.config.with_overrides(overrides).map_err(config_failure)?,
    };
    cfg.seed = seed;
    Ok((model, cfg))
}

fn cmd_eval(cli: &Cli, overrides: &[String], checkpoint: &Path, mode: EvalMode) -> Result<(), Failure> {
    let (model, cfg) = load_checkpoint(cli, overrides, checkpoint)?;
    let data = load_dataset(&cfg)?;
    let settings = EvalSettings::from_config(&cfg, data.class_names.clone());
    let report = evaluate(&model, &data.test, mode, &settings)?;
    let dir = run_dir(&cli.out, &format!("{}-eval", cfg.model.name))?;
    write_text(&dir.join("config.snapshot"), &cfg.to_toml())?;
    write_json(&dir.join("metrics.json"), &report)?;
    println!("{}", dir.display());
    println!("{mode}: OA {:.4} mF1 {:.4} mIoU {:.4}", report.oa, report.mf1, report.miou);
    Ok(())
}

/// Trains each listed variant on the same seed and data.
pub fn ablate(cfg: &RunConfig, variants: &[AblationVariant]) -> Result<Vec<AblationRow>, Failure> {
    let data = load_dataset(cfg)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let vc = v.configure(cfg);
        let label = v.label();
        let (_, summary) = train(&vc, &data, &mut |ev| progress(label, vc.schedule.epochs, &ev))?;
        rows.push(AblationRow::new(v, summary.params.trainable, &summary.test));
    }
    Ok(rows)
}

fn cmd_ablate(cli: &Cli, overrides: &[String], names: &[String]) -> Result<(), Failure> {
    let cfg = load_config(cli, overrides)?;
    let variants = if names.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        names
            .iter()
            .map(|n| {
                AblationVariant::parse(n.trim()).ok_or_else(|| {
                    Failure::Config(format!("unknown variant {n:?} (expected Base, +CPIA, +CPIA+DGFM or Full)"))
                })
            })
            .collect::<Result<_, _>>()?
    };
    let rows = ablate(&cfg, &variants)?;
    let dir = run_dir(&cli.out, &format!("{}-ablate", cfg.model.name))?;
    write_text(&dir.join("config.snapshot"), &cfg.to_toml())?;
    write_text(&dir.join("ablation.csv"), &to_csv(&rows))?;
    println!("{}", dir.display());
    print!("{}", render_ablation(&rows));
    Ok(())
}

/// One seed's masking-on model and its masking-off twin, trained on the
/// same data and evaluated under every modality setting.
#[derive(Clone, Debug, Serialize)]
pub struct PairedRobustness {
    pub seed: u64,
    pub mcrm_on: RobustnessReport,
    pub mcrm_off: RobustnessReport,
}

impl PairedRobustness {
    /// Whether masking shrank the rgb_only mIoU drop.
    pub fn masking_helps(&self) -> bool {
        self.mcrm_on.rgb_only_drop.miou < self.mcrm_off.rgb_only_drop.miou
    }
}

pub fn paired_robustness(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<PairedRobustness>, Failure> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        let data = load_dataset(&base)?;
        let settings = EvalSettings::from_config(&base, data.class_names.clone());
        let eval_twin = |mcrm: bool| -> Result<RobustnessReport, Failure> {
            let mut c = base.clone();
            c.mcrm.enabled = mcrm;
            let label = format!("seed {seed} mcrm {}", if mcrm { "on" } else { "off" });
            let (trainer, _) = train(&c, &data, &mut |ev| progress(&label, c.schedule.epochs, &ev))?;
            Ok(robustness(&trainer.model, &data.test, &settings)?)
        };
        let mcrm_on = eval_twin(true)?;
        let mcrm_off = eval_twin(false)?;
        out.push(PairedRobustness { seed, mcrm_on, mcrm_off });
    }
    Ok(out)
}

fn cmd_robustness(
    cli: &Cli,
    overrides: &[String],
    checkpoint: Option<&Path>,
    seeds: &[u64],
) -> Result<(), Failure> {
    let (cfg, rows, pairs) = match checkpoint {
        Some(path) => {
            let (model, cfg) = load_checkpoint(cli, overrides, path)?;
            let data = load_dataset(&cfg)?;
            let settings = EvalSettings::from_config(&cfg, data.class_names.clone());
            let report = robustness(&model, &data.test, &settings)?;
            (cfg.clone(), robustness_rows("checkpoint", cfg.seed, &report), Vec::new())
        }
        None if !seeds.is_empty() => {
            let cfg = load_config(cli, overrides)?;
            let pairs = paired_robustness(&cfg, seeds)?;
            let rows = pairs
                .iter()
                .flat_map(|p| {
                    let mut r = robustness_rows("mcrm_on", p.seed, &p.mcrm_on);
                    r.extend(robustness_rows("mcrm_off", p.seed, &p.mcrm_off));
                    r
                })
                .collect();
            (cfg, rows, pairs)
        }
        None => {
            return Err(Failure::Config(
                "robustness needs --checkpoint PATH or --paired-seeds S1,S2,...".into(),
            ))
        }
    };
    let dir = run_dir(&cli.out, &format!("{}-robustness", cfg.model.name))?;
    write_text(&dir.join("config.snapshot"), &cfg.to_toml())?;
    write_text(&dir.join("robustness.csv"), &to_csv(&rows))?;
    println!("{}", dir.display());
    print!("{}", render_robustness(&rows));
    if !pairs.is_empty() {
        let wins = pairs.iter().filter(|p| p.masking_helps()).count();
        println!(
            "rgb_only mIoU drop smaller with masking in {wins} of {} seeds",
            pairs.len()
        );
    }
    Ok(())
}

fn cmd_params(cli: &Cli, overrides: &[String], json: bool) -> Result<(), Failure> {
    let cfg = load_config(cli, overrides)?;
    let model = Model::layout(&cfg)?;
    let counts = ParamCounts::of(&model.store);
    if json {
        println!("{}", serde_json::to_string_pretty(&counts).expect("counts serialize"));
        return Ok(());
    }
    println!("{:<20} {:<9} {:>12}", "group", "status", "params");
    for g in &counts.groups {
        let status = if g.frozen { "frozen" } else { "trainable" };
        println!("{:<20} {:<9} {:>12}", g.group.name(), status, g.count);
    }
    println!(
        "frozen {}  trainable {} ({:.4} M)  total {}  trainable share {:.2}%",
        counts.frozen,
        counts.trainable,
        counts.trainable_millions(),
        counts.total,
        100.0 * counts.trainable_ratio()
    );
    Ok(())
}

fn cmd_export_synth(cli: &Cli, overrides: &[String], dir: &Path) -> Result<(), Failure> {
    let cfg = load_config(cli, overrides)?;
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| io_failure(dir, e))?;
        if entries.next().is_some() {
            return Err(Failure::Config(format!("export directory {} is not empty", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let data = synth_dataset(&cfg.data.synth, cfg.seed)?;
    write_classes(&dir.join("classes.txt"), &data.classes)?;
    for (split, tiles) in [("train", &data.train), ("test", &data.test)] {
        for t in tiles {
            write_tile(dir, split, t)?;
        }
    }
    println!(
        "wrote {} train and {} test tiles to {}",
        data.train.len(),
        data.test.len(),
        dir.display()
    );
    Ok(())
}
