use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use musfill_core::codec::encode_song;
use musfill_core::controls::{control_values, Calibration};
use musfill_core::corpus::{build_dataset, filter_songs, read_examples, read_midi_dir, WINDOW_BARS};
use musfill_core::harness::{evaluate, EvalConfig, Generator, ModelGenerator, OriginalGenerator};
use musfill_core::masking::MaskMode;
use musfill_core::metrics::{MetricReport, FEATURE_NAMES};
use musfill_core::midi::{read_song, write_midi};
use musfill_core::model::{read_checkpoint, train, write_checkpoint, EncodedExample, ModelParams, Trainer};
use musfill_core::{Category, QuantizedSong};
use musfill_service::api::{InfillRequest, Region, TrackOverride};
use musfill_service::engine::run_infill;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::settings::TrainSettings;

/// What a command prints: `json` under `--json`, `human` otherwise.
pub struct Printed {
    pub json: Value,
    pub human: String,
}

fn printed(value: impl Serialize, human: String) -> Printed {
    Printed {
        json: serde_json::to_value(value).expect("output serializes"),
        human,
    }
}

fn load_song(path: &Path) -> anyhow::Result<(QuantizedSong, Option<u32>)> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let (song, report) = read_song(&bytes).with_context(|| path.display().to_string())?;
    if let Some(bars) = report.truncated_from_bars {
        log::warn!("{}: truncated from {bars} to {} bars", path.display(), song.bars);
    }
    Ok((song, report.truncated_from_bars))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn tokenize(midi: &Path, with_controls: bool) -> anyhow::Result<Printed> {
    let (song, truncated_from) = load_song(midi)?;
    let controls = if with_controls {
        Some(musfill_core::compute_control_set(&song)?)
    } else {
        None
    };
    let seq = encode_song(&song, controls.as_ref())?;
    let tokens: Vec<String> = seq.tokens.iter().map(|t| t.to_string()).collect();
    let human = tokens.join(", ");
    Ok(printed(
        json!({
            "tokens": tokens,
            "ids": seq.ids(),
            "with_controls": with_controls,
            "bars": song.bars,
            "truncated_from_bars": truncated_from,
        }),
        human,
    ))
}

pub fn controls(midi: &Path) -> anyhow::Result<Printed> {
    let (song, _) = load_song(midi)?;
    let values = control_values(&song)?;
    let bins = values.bin(&Calibration::default());
    let mut human = format!(
        "key {} (k_{})  tempo {:.1} bpm (t_{})\n",
        values.key.name(),
        bins.key_bin,
        values.tempo_bpm,
        bins.tempo_bin
    );
    writeln!(human, "{:<6} {:<14} {:>14} {:>14} {:>14}", "track", "role", "density", "occupation", "polyphony").unwrap();
    let mut tracks = vec![];
    for (i, t) in song.tracks.iter().enumerate() {
        let b = bins.tracks[i];
        let cell = |v: f64, bin: u8| format!("{v:.3} ({bin})");
        writeln!(
            human,
            "{:<6} {:<14} {:>14} {:>14} {:>14}",
            i,
            t.role.name(),
            cell(values.density[i], b.density),
            cell(values.occupation[i], b.occupation),
            cell(values.polyphony[i], b.polyphony)
        )
        .unwrap();
        tracks.push(json!({
            "role": t.role.name(),
            "density": values.density[i],
            "occupation": values.occupation[i],
            "polyphony": values.polyphony[i],
            "bins": b,
        }));
    }
    Ok(printed(
        json!({
            "key": values.key.name(),
            "key_bin": bins.key_bin,
            "tempo_bpm": values.tempo_bpm,
            "tempo_bin": bins.tempo_bin,
            "tracks": tracks,
            "controls": bins,
        }),
        human.trim_end().to_string(),
    ))
}

pub fn tension(midi: &Path) -> anyhow::Result<Printed> {
    let (song, _) = load_song(midi)?;
    let values = control_values(&song)?;
    let bins = values.bin(&Calibration::default());
    let mut human = format!("key {}\n{:<5} {:>7} {:>16} {:>16}\n", values.key.name(), "bar", "notes", "strain", "diameter");
    let mut bars = vec![];
    for (i, t) in values.tension.iter().enumerate() {
        let b = bins.bars[i];
        writeln!(
            human,
            "{:<5} {:>7} {:>16} {:>16}",
            i,
            t.note_count,
            format!("{:.4} (s_{})", t.tensile_strain, b.strain),
            format!("{:.4} (a_{})", t.cloud_diameter, b.diameter)
        )
        .unwrap();
        bars.push(json!({
            "bar": i,
            "notes": t.note_count,
            "tensile_strain": t.tensile_strain,
            "cloud_diameter": t.cloud_diameter,
            "strain_bin": b.strain,
            "diameter_bin": b.diameter,
        }));
    }
    Ok(printed(
        json!({"key": values.key.name(), "key_bin": bins.key_bin, "bars": bars}),
        human.trim_end().to_string(),
    ))
}

pub fn dataset_build(dir: &Path, out: &Path, seed: u64, calibration: Option<&Path>) -> anyhow::Result<Printed> {
    let cal = match calibration {
        Some(p) => Calibration::from_json(&fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?)?,
        None => Calibration::default(),
    };
    let files = read_midi_dir(dir)?;
    let (songs, rejected) = filter_songs(&files);
    if songs.is_empty() {
        bail!("no usable songs among {} files in {}", files.len(), dir.display());
    }
    let manifest = build_dataset(&songs, &rejected, seed, &cal, out)?;
    let hash = sha256_hex(&fs::read(out.join("manifest.json"))?);
    let c = &manifest.counts;
    let human = format!(
        "seed {seed}\nfiles {} accepted {} rejected {}\nsongs train/valid/test {}/{}/{}\nexamples train/valid/test {}/{}/{}\nmanifest sha256 {hash}",
        c.files,
        c.accepted,
        c.rejected,
        c.songs.train,
        c.songs.valid,
        c.songs.test,
        c.examples.train,
        c.examples.valid,
        c.examples.test
    );
    Ok(printed(
        json!({"seed": seed, "manifest_sha256": hash, "out": out, "counts": manifest.counts}),
        human,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Pretrain,
    Finetune,
}

fn stage_examples(path: &Path, stage: Stage) -> anyhow::Result<Vec<EncodedExample>> {
    let examples = read_examples(path)?;
    Ok(examples
        .iter()
        .filter(|e| (e.mode == MaskMode::Pretrain) == (stage == Stage::Pretrain))
        .map(EncodedExample::from)
        .collect())
}

fn fits(e: &EncodedExample, p: &ModelParams<f32>) -> bool {
    e.encoder.len() <= p.config.max_encoder_len && e.decoder_input.len() <= p.config.max_decoder_len
}

pub fn train_stage(config: &Path, stage: Stage, seed: Option<u64>) -> anyhow::Result<Printed> {
    let mut settings = TrainSettings::load(config)?;
    if let Some(s) = seed {
        settings.train.seed = s;
    }
    let cfg = &settings.train;
    let paths = &settings.paths;
    let dir = paths.dataset.join(&paths.variant);
    let examples = stage_examples(&dir.join("train.jsonl"), stage)?;
    if examples.is_empty() {
        bail!("no {stage:?} examples in {}", dir.display());
    }
    let (params, epochs, name, out) = match stage {
        Stage::Pretrain => (
            ModelParams::<f32>::init(&settings.model, cfg.seed),
            cfg.pretrain_epochs,
            "pretrain",
            &paths.pretrain_checkpoint,
        ),
        Stage::Finetune => (
            read_checkpoint(&paths.pretrain_checkpoint)
                .with_context(|| format!("cannot load {}", paths.pretrain_checkpoint.display()))?,
            cfg.finetune_epochs,
            "finetune",
            &paths.finetune_checkpoint,
        ),
    };
    for p in [out, &paths.log] {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut log = OpenOptions::new().create(true).append(true).open(&paths.log)?;
    let mut trainer = Trainer::new(params, cfg);
    let last = trainer.run_epochs(&examples, cfg, epochs, name, &mut log)?;
    write_checkpoint(out, &trainer.params)?;

    let valid: Vec<EncodedExample> = stage_examples(&dir.join("valid.jsonl"), stage)
        .unwrap_or_default()
        .into_iter()
        .filter(|e| fits(e, &trainer.params))
        .collect();
    let valid_stats = if valid.is_empty() {
        None
    } else {
        Some(train::evaluate(&trainer.params, &valid)?)
    };
    let human = format!(
        "seed {}\nstage {name}: {} steps on {} examples\nlast train loss {}\nvalid loss {}\ncheckpoint {}",
        cfg.seed,
        trainer.step,
        examples.len(),
        last.as_ref().map_or("-".into(), |s| format!("{:.4} (accuracy {:.3})", s.loss, s.accuracy())),
        valid_stats.as_ref().map_or("-".into(), |s| format!("{:.4} (accuracy {:.3})", s.loss, s.accuracy())),
        out.display()
    );
    Ok(printed(
        json!({
            "seed": cfg.seed,
            "stage": name,
            "steps": trainer.step,
            "examples": examples.len(),
            "train_loss": last.as_ref().map(|s| s.loss),
            "train_accuracy": last.as_ref().map(|s| s.accuracy()),
            "valid_loss": valid_stats.as_ref().map(|s| s.loss),
            "valid_accuracy": valid_stats.as_ref().map(|s| s.accuracy()),
            "checkpoint": out,
        }),
        human,
    ))
}

/// The first window of every usable song in `dir`.
pub fn load_testset(dir: &Path) -> anyhow::Result<Vec<QuantizedSong>> {
    let files = read_midi_dir(dir)?;
    let (songs, rejected) = filter_songs(&files);
    for r in &rejected {
        log::warn!("skipping {}: {}", r.name, r.reason);
    }
    Ok(songs
        .into_iter()
        .map(|s| s.song.slice_bars(0, s.song.bars.min(WINDOW_BARS)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GeneratorKind {
    Model,
    /// Returns the original notes; every difference is zero.
    Original,
}

pub fn report_table(report: &MetricReport) -> String {
    let mut out = format!("{:<14} {:>5}", "category", "n");
    for name in FEATURE_NAMES {
        write!(out, " {name:>20}").unwrap();
    }
    for cat in Category::ALL {
        let Some(s) = report.aggregate.get(&cat) else {
            continue;
        };
        write!(out, "\n{:<14} {:>5}", cat.name(), s.count).unwrap();
        for f in 0..FEATURE_NAMES.len() {
            write!(out, " {:>20}", format!("{:.4}±{:.4}", s.mean[f], s.std[f])).unwrap();
        }
    }
    out
}

fn report_json(report: &MetricReport) -> Value {
    let mut cats = BTreeMap::new();
    for (cat, s) in &report.aggregate {
        let named = |v: &[f64]| -> BTreeMap<&str, f64> { FEATURE_NAMES.iter().copied().zip(v.iter().copied()).collect() };
        cats.insert(cat.name(), json!({"count": s.count, "mean": named(&s.mean), "std": named(&s.std)}));
    }
    json!(cats)
}

pub struct EvalArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub testset: &'a Path,
    pub n: usize,
    pub seed: u64,
    pub temperature: f64,
    pub with_controls: bool,
    pub generator: GeneratorKind,
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<Printed> {
    let songs = load_testset(args.testset)?;
    if songs.is_empty() {
        bail!("no usable songs in {}", args.testset.display());
    }
    let cfg = EvalConfig {
        n: args.n,
        seed: args.seed,
        with_controls: args.with_controls,
    };
    let params;
    let generator: Box<dyn Generator> = match args.generator {
        GeneratorKind::Original => Box::new(OriginalGenerator),
        GeneratorKind::Model => {
            let path = args.checkpoint.context("--checkpoint is required with the model generator")?;
            params = read_checkpoint(path).with_context(|| format!("cannot load {}", path.display()))?;
            Box::new(ModelGenerator {
                params: &params,
                temperature: args.temperature,
            })
        }
    };
    let report = evaluate(&songs, generator.as_ref(), &cfg)?;
    let evaluated = songs.len().min(args.n);
    let human = format!(
        "seed {}\ngenerator {} on {evaluated} songs ({} controls)\n{}",
        args.seed,
        generator.name(),
        if args.with_controls { "with" } else { "without" },
        report_table(&report)
    );
    Ok(printed(
        json!({
            "seed": args.seed,
            "generator": generator.name(),
            "songs": evaluated,
            "with_controls": args.with_controls,
            "all_zero": report.is_all_zero(),
            "categories": report_json(&report),
        }),
        human,
    ))
}

/// `name=value` control assignment for `infill --set`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlAssignment {
    pub name: String,
    pub value: u8,
}

impl std::str::FromStr for ControlAssignment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, value) = s.split_once('=').ok_or_else(|| format!("expected name=value, got {s:?}"))?;
        let name = name.trim().to_ascii_lowercase();
        if !["density", "occupation", "polyphony", "strain", "diameter"].contains(&name.as_str()) {
            return Err(format!("unknown control {name:?}"));
        }
        let value = value.trim().parse().map_err(|_| format!("bad bin {value:?}"))?;
        Ok(Self { name, value })
    }
}

pub struct InfillArgs<'a> {
    pub midi: &'a Path,
    pub bar: u32,
    pub track: usize,
    pub set: &'a [ControlAssignment],
    pub checkpoint: &'a Path,
    pub seed: u64,
    pub temperature: f64,
    pub out: Option<&'a PathBuf>,
}

pub fn infill(args: &InfillArgs) -> anyhow::Result<Printed> {
    let (song, _) = load_song(args.midi)?;
    let controls = musfill_core::compute_control_set(&song)?;
    let parent = encode_song(&song, Some(&controls))?;
    let mut req = InfillRequest {
        regions: vec![Region {
            bar: args.bar,
            track: args.track,
        }],
        control_overrides: Default::default(),
        temperature: args.temperature,
        seed: args.seed,
        parent_version: None,
    };
    for a in args.set {
        match a.name.as_str() {
            "density" | "occupation" | "polyphony" => {
                let t = req.control_overrides.tracks.entry(args.track).or_insert_with(TrackOverride::default);
                match a.name.as_str() {
                    "density" => t.density = Some(a.value),
                    "occupation" => t.occupation = Some(a.value),
                    _ => t.polyphony = Some(a.value),
                }
            }
            _ => {
                let b = req.control_overrides.bars.entry(args.bar).or_default();
                if a.name == "strain" {
                    b.strain = Some(a.value);
                } else {
                    b.diameter = Some(a.value);
                }
            }
        }
    }
    let params = read_checkpoint(args.checkpoint).with_context(|| format!("cannot load {}", args.checkpoint.display()))?;
    let outcome = run_infill(&params, &parent, &controls, &req)?;
    if let Some(path) = args.out {
        fs::write(path, write_midi(&outcome.song)?).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let mut human = format!("seed {}\n", args.seed);
    for (k, ok) in &outcome.matched {
        writeln!(human, "{k}: {}", if *ok { "matched" } else { "not matched" }).unwrap();
    }
    let cell: Vec<String> = outcome.song.track_bar_notes(args.track, args.bar).iter().map(|n| format!("{}@{}+{}", n.pitch, n.onset, n.duration)).collect();
    write!(human, "bar {} track {}: {}", args.bar, args.track, cell.join(" ")).unwrap();
    if let Some(p) = args.out {
        write!(human, "\nwrote {}", p.display()).unwrap();
    }
    Ok(printed(
        json!({
            "seed": args.seed,
            "tokens": outcome.tokens.to_text(),
            "requested_controls": outcome.requested,
            "controls": outcome.actual,
            "matched": outcome.matched,
            "truncated": outcome.truncated,
            "out": args.out,
        }),
        human,
    ))
}
