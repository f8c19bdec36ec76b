use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use steerhoi_cli::experiment::{self, Axis, Dataset};
use steerhoi_cli::{plot, RunConfig};

#[derive(Parser)]
#[command(name = "steerhoi", version, about = "Steered-generator HOI detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write `checkpoint.json` plus `metrics.jsonl`.
    Train(Common),
    /// Score a checkpoint (or the ground-truth oracle).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score ground truth re-emitted as predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Print the triplets predicted for one image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: String,
    },
    /// Train and evaluate one model per point along an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// kernel_length | component_toggle | alpha
        #[arg(long)]
        axis: String,
    },
    /// Write encoder and kernel-conditioned heatmaps for one image.
    PlotAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: String,
    },
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn checkpoint_path(arg: &Option<PathBuf>, out: &Path) -> PathBuf {
    arg.clone().unwrap_or_else(|| out.join("checkpoint.json"))
}

fn image_index(data: &Dataset, id: &str) -> Result<usize> {
    data.test.iter().position(|s| s.image_id == id).with_context(|| {
        let example = data.test.first().map_or(String::new(), |s| format!(" (ids look like {:?})", s.image_id));
        format!("image {id:?} is not in the evaluation set{example}")
    })
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[derive(Serialize)]
struct InferredTriplet {
    human_box: [f64; 4],
    object_box: [f64; 4],
    object: String,
    verb: String,
    score: f64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(common) => {
            let (cfg, out) = resolve(&common)?;
            let data = Dataset::load(&cfg)?;
            let o = experiment::run_train(&cfg, &data, Some(&out), true)?;
            println!(
                "loss {:.4} -> {:.4} over {} steps; checkpoint in {}",
                o.loss_before,
                o.loss_after,
                o.logs.len(),
                out.display()
            );
        }
        Command::Eval { common, checkpoint, oracle } => {
            let (cfg, out) = resolve(&common)?;
            let data = Dataset::load(&cfg)?;
            let reports = if oracle {
                experiment::run_oracle_eval(&cfg, &data)?
            } else {
                let model = experiment::load_model(&checkpoint_path(&checkpoint, &out), &data)?;
                experiment::run_eval(&cfg, &data, &model)?
            };
            print!("{}", experiment::write_reports(&reports, &out)?);
        }
        Command::Infer { common, checkpoint, image } => {
            let (cfg, out) = resolve(&common)?;
            let data = Dataset::load(&cfg)?;
            let model = experiment::load_model(&checkpoint_path(&checkpoint, &out), &data)?;
            let i = image_index(&data, &image)?;
            let prep = model.prepare(&data.test[i], i as u64)?;
            let preds = model.predict(&prep)?;
            let triplets: Vec<InferredTriplet> = model
                .triplets(&prep, &preds)?
                .into_iter()
                .map(|t| InferredTriplet {
                    human_box: t.human_box.to_f64(),
                    object_box: t.object_box.to_f64(),
                    object: data.objects[t.object_category.0].clone(),
                    verb: data.verbs[t.verb.0].clone(),
                    score: t.score,
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&triplets)?);
        }
        Command::Sweep { common, axis } => {
            let axis = Axis::parse(&axis)?;
            let (cfg, out) = resolve(&common)?;
            let data = Dataset::load(&cfg)?;
            let rows = experiment::run_sweep(&cfg, &data, axis)?;
            let table = experiment::sweep_table(&rows);
            std::fs::create_dir_all(&out)?;
            let name = serde_json::to_value(axis)?.as_str().unwrap_or("axis").to_string();
            std::fs::write(out.join(format!("sweep_{name}.tsv")), &table)?;
            std::fs::write(out.join(format!("sweep_{name}.json")), serde_json::to_vec_pretty(&rows)?)?;
            print!("{table}");
        }
        Command::PlotAttention { common, checkpoint, image } => {
            let (cfg, out) = resolve(&common)?;
            let data = Dataset::load(&cfg)?;
            let model = experiment::load_model(&checkpoint_path(&checkpoint, &out), &data)?;
            let i = image_index(&data, &image)?;
            let prep = model.prepare(&data.test[i], i as u64)?;
            let maps = model.attention_maps(&prep)?;
            if maps.is_empty() {
                bail!("no candidates selected for image {image:?}; nothing written");
            }
            for (k, a) in maps.iter().enumerate() {
                let (c, u) = a.union_mass();
                println!("candidate {k} ({}): box-union mass conditioned {c:.3}, encoder {u:.3}", a.prediction.phrase);
            }
            for p in plot::write_attention(&prep.raster, &maps, &out.join("attention"), &file_stem(&image))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
