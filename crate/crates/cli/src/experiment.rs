//! Train / evaluate / sweep pipelines shared by the binary and the tests.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use steerhoi::data::{
    build_splits, default_synth_objects, default_synth_verbs, load_hico, synth_generate, HoiSample, Split,
};
use steerhoi::evaluation::{evaluate, oracle_predictions, EvalOptions, EvalReport};
use steerhoi::model::{Checkpoint, HeadMode, HoiModel, Prepared};
use steerhoi::objectives::ExclusionSet;
use steerhoi::steering::KernelMode;
use steerhoi::train::{dataset_loss, train, StepLog};
use steerhoi::types::{HoiTriplet, TripletClass};

use crate::config::{DataConfig, RunConfig};

/// Loaded data with its vocabularies.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    pub train: Vec<HoiSample<f64>>,
    pub test: Vec<HoiSample<f64>>,
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data {
            DataConfig::Synth { synth, test_seed } => {
                let train = synth_generate(synth)?;
                let test = match test_seed {
                    Some(seed) => synth_generate(&steerhoi::data::SynthConfig { seed: *seed, ..synth.clone() })?,
                    None => train.clone(),
                };
                Ok(Self { verbs: default_synth_verbs(), objects: default_synth_objects(), train, test })
            }
            DataConfig::Hico { train, test, verbs, objects } => {
                let verbs = read_names(verbs)?;
                let objects = read_names(objects)?;
                Ok(Self {
                    train: load_hico(train, &objects, &verbs)?,
                    test: load_hico(test, &objects, &verbs)?,
                    verbs,
                    objects,
                })
            }
        }
    }

    pub fn split(&self, cfg: &RunConfig) -> Result<Split> {
        Ok(build_splits(&self.train, &cfg.split, self.verbs.len(), self.objects.len())?)
    }

    /// The held-out partition re-derived on the evaluation images.
    pub fn eval_split(&self, cfg: &RunConfig) -> Result<Split> {
        let train_split = self.split(cfg)?;
        let mut spec = cfg.split.clone();
        spec.held_out = train_split.held_out.clone();
        spec.num_unseen = 0;
        let mut split = build_splits(&self.test, &spec, self.verbs.len(), self.objects.len())?;
        // Rarity is a property of the training distribution.
        let all: BTreeSet<TripletClass> = split.rare.union(&split.non_rare).copied().collect();
        split.non_rare = all.iter().filter(|c| train_split.non_rare.contains(c)).copied().collect();
        split.rare = all.difference(&split.non_rare).copied().collect();
        Ok(split)
    }

    pub fn exclusions(&self, cfg: &RunConfig) -> Result<ExclusionSet> {
        let find = |p: &str| {
            self.verbs
                .iter()
                .position(|v| v == p)
                .map(steerhoi::types::VerbId)
                .with_context(|| format!("exclusion verb {p:?} not in the vocabulary"))
        };
        let pairs = cfg.exclusions.iter().map(|(a, b)| Ok((find(a)?, find(b)?))).collect::<Result<Vec<_>>>()?;
        Ok(ExclusionSet::new(&pairs, self.verbs.len())?)
    }
}

pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<HoiModel<f64>> {
    Ok(HoiModel::new(cfg.model.clone(), &data.verbs, &data.objects)?)
}

pub fn prepare(
    model: &HoiModel<f64>,
    samples: &[HoiSample<f64>],
    indices: impl Iterator<Item = usize>,
) -> Result<Vec<Prepared<f64>>> {
    Ok(indices.map(|i| model.prepare(&samples[i], i as u64)).collect::<steerhoi::Result<_>>()?)
}

pub struct TrainOutcome {
    pub model: HoiModel<f64>,
    pub logs: Vec<StepLog>,
    /// Weighted total over the training images before and after.
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Trains on the split's training images; writes `metrics.jsonl` and
/// `checkpoint.json` into `out` when given.
pub fn run_train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>, verbose: bool) -> Result<TrainOutcome> {
    let split = data.split(cfg)?;
    let exclusions = data.exclusions(cfg)?;
    let mut model = build_model(cfg, data)?;
    let prep = prepare(&model, &data.train, split.train.iter().copied())?;
    let (loss_before, _) = dataset_loss(&model, &prep, &cfg.loss, &exclusions)?;
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut write_err = None;
    let logs = train(&mut model, &prep, &cfg.loss, &exclusions, &cfg.train, |log| {
        if verbose && (log.step % 25 == 0 || log.step + 1 == cfg.train.steps) {
            eprintln!("{}", log.line());
        }
        if let Some(w) = metrics.as_mut() {
            if let Err(e) = serde_json::to_writer(&mut *w, log).map_err(std::io::Error::from).and_then(|_| writeln!(w))
            {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    let (loss_after, _) = dataset_loss(&model, &prep, &cfg.loss, &exclusions)?;
    if let (Some(dir), Some(mut w)) = (out, metrics) {
        w.flush()?;
        save_checkpoint(&model.checkpoint(), &dir.join("checkpoint.json"))?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    Ok(TrainOutcome { model, logs, loss_before, loss_after })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec(ck)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load_model(path: &Path, data: &Dataset) -> Result<HoiModel<f64>> {
    let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ck: Checkpoint = serde_json::from_slice(&text).context("parsing checkpoint")?;
    Ok(HoiModel::from_checkpoint(&ck, &data.verbs, &data.objects)?)
}

/// Full inference path on every evaluation image.
pub fn predict_all(model: &HoiModel<f64>, data: &Dataset) -> Result<Vec<Vec<HoiTriplet<f64>>>> {
    let prep = prepare(model, &data.test, 0..data.test.len())?;
    prep.iter()
        .map(|p| {
            let c = model.predict(p)?;
            Ok(model.triplets(p, &c)?)
        })
        .collect()
}

pub fn score(cfg: &RunConfig, data: &Dataset, preds: &[Vec<HoiTriplet<f64>>]) -> Result<Vec<EvalReport>> {
    let split = data.eval_split(cfg)?;
    let opts = EvalOptions {
        iou_threshold: cfg.eval.iou_threshold,
        max_per_image: cfg.eval.max_per_image,
        num_verbs: data.verbs.len(),
        num_objects: data.objects.len(),
    };
    cfg.eval.settings.iter().map(|&s| Ok(evaluate(preds, &data.test, &split, s, &opts, &split.unseen)?)).collect()
}

pub fn run_eval(cfg: &RunConfig, data: &Dataset, model: &HoiModel<f64>) -> Result<Vec<EvalReport>> {
    score(cfg, data, &predict_all(model, data)?)
}

pub fn run_oracle_eval(cfg: &RunConfig, data: &Dataset) -> Result<Vec<EvalReport>> {
    score(cfg, data, &oracle_predictions(&data.test))
}

pub fn write_reports(reports: &[EvalReport], dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(reports)?)?;
    let text: String = reports.iter().map(EvalReport::table).collect::<Vec<_>>().join("\n");
    fs::write(dir.join("report.txt"), &text)?;
    Ok(text)
}

/// An ablation applied on top of the configured model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Toggle {
    NoNce,
    NoGen,
    /// Bypass the conduit: one linear projection of `v_k` as the kernel.
    NoCsc,
    NoLogic,
    Classifier,
    NoGlobal,
    NoLocal,
    NaiveFusion,
}

impl Toggle {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "-l_nce" => Self::NoNce,
            "-l_gen" => Self::NoGen,
            "-csc" => Self::NoCsc,
            "-l_logic" => Self::NoLogic,
            "classifier" => Self::Classifier,
            "-f_global" => Self::NoGlobal,
            "-v_k" => Self::NoLocal,
            "naive_fusion" => Self::NaiveFusion,
            other => bail!("unknown toggle {other:?}"),
        })
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Self::NoNce => cfg.loss.lambda_nce = 0.0,
            Self::NoGen => cfg.loss.lambda_gen = 0.0,
            Self::NoCsc => cfg.model.steering.mode = KernelMode::Direct,
            Self::NoLogic => cfg.loss.lambda_logic = 0.0,
            Self::Classifier => cfg.model.head = HeadMode::Classifier,
            Self::NoGlobal => cfg.model.steering.use_global = false,
            Self::NoLocal => cfg.model.steering.use_local = false,
            Self::NaiveFusion => cfg.model.steering.mode = KernelMode::NaiveMlp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    KernelLength,
    ComponentToggle,
    Alpha,
}

impl Axis {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "kernel_length" => Self::KernelLength,
            "component_toggle" => Self::ComponentToggle,
            "alpha" => Self::Alpha,
            other => bail!("unknown sweep axis {other:?} (kernel_length | component_toggle | alpha)"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: String,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Reports in the configured settings order.
    pub reports: Vec<EvalReport>,
}

/// Variant configurations along `axis`, labelled.
pub fn sweep_points(cfg: &RunConfig, axis: Axis) -> Result<Vec<(String, RunConfig)>> {
    let mut points = Vec::new();
    match axis {
        Axis::KernelLength => {
            for &l in &cfg.sweep.kernel_lengths {
                let mut c = cfg.clone();
                c.model.steering.kernel_length = l;
                points.push((format!("L={l}"), c));
            }
        }
        Axis::Alpha => {
            for &a in &cfg.sweep.alphas {
                let mut c = cfg.clone();
                c.model.perception.alpha = a;
                points.push((format!("alpha={a}"), c));
            }
        }
        Axis::ComponentToggle => {
            let toggles =
                cfg.sweep.toggles.iter().map(|t| Ok((t.clone(), Toggle::parse(t)?))).collect::<Result<Vec<_>>>()?;
            points.push(("full".to_string(), cfg.clone()));
            for (name, t) in toggles {
                let mut c = cfg.clone();
                t.apply(&mut c);
                points.push((name, c));
            }
        }
    }
    for (_, c) in &points {
        c.validate()?;
    }
    Ok(points)
}

pub fn run_point(cfg: &RunConfig, data: &Dataset) -> Result<(TrainOutcome, Vec<EvalReport>)> {
    let outcome = run_train(cfg, data, None, false)?;
    let reports = run_eval(cfg, data, &outcome.model)?;
    Ok((outcome, reports))
}

pub fn run_sweep(cfg: &RunConfig, data: &Dataset, axis: Axis) -> Result<Vec<SweepRow>> {
    sweep_points(cfg, axis)?
        .into_iter()
        .map(|(point, c)| {
            let (o, reports) = run_point(&c, data)?;
            Ok(SweepRow { point, loss_before: o.loss_before, loss_after: o.loss_after, reports })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut s = String::from("point\tsetting\tfull\trare\tnon_rare\tunseen\tseen\tloss_before\tloss_after\n");
    for r in rows {
        for rep in &r.reports {
            let m = &rep.map;
            let _ = writeln!(
                s,
                "{}\t{:?}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}",
                r.point,
                rep.setting,
                fmt(m.full),
                fmt(m.rare),
                fmt(m.non_rare),
                fmt(m.unseen),
                fmt(m.seen),
                r.loss_before,
                r.loss_after
            );
        }
    }
    s
}
