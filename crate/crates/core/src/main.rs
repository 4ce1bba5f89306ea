use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use cyto_fuse::compare::{self, load_stack, parse_combos, parse_rules};
use cyto_fuse::io::{
    create_dir, load_manifest, read_mask, write_atomic, write_mask, write_tensor, Manifest,
};
use cyto_fuse::synth::{write_dataset, SynthConfig};
use cyto_fuse::{
    argmax_decide, fused_scores, ConfusionMatrix, Error, ErrorClass, FusionRule, Result,
};

/// Environment variable capping worker threads (0 or unset = one per core).
const THREADS_ENV: &str = "CYTO_FUSE_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "cyto-fuse",
    version,
    about = "Late fusion of segmentation probability maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse the probability maps of several models into one mask per image
    Fuse {
        #[arg(long)]
        manifest: PathBuf,
        /// fuzzy, avg, geo, median, max, min, borda or majority
        #[arg(long)]
        rule: String,
        /// Comma-separated model names from the manifest
        #[arg(long)]
        models: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the fused score tensor of every image
        #[arg(long)]
        scores: bool,
    },
    /// Score predicted masks against the manifest's ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        report: ReportFormat,
    },
    /// Evaluate every rule on every model combination and write a markdown table
    Compare {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated rule ids, or "all"
        #[arg(long, default_value = "all")]
        rules: String,
        /// Comma-separated combinations such as "U+S,U+P", or "all"
        #[arg(long, default_value = "all")]
        combos: String,
        /// Markdown output; a JSON copy is written next to it
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with probability maps from several base models
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        images: usize,
        /// Image size as HxW, e.g. 128x128
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        variants: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Table,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let dim = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| format!("bad dimension '{v}'"))
    };
    Ok((dim(h)?, dim(w)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            match err.class() {
                ErrorClass::Io => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{THREADS_ENV}={value} is not a thread count")))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::Fuse {
            manifest,
            rule,
            models,
            out,
            scores,
        } => cmd_fuse(&manifest, &rule, &models, &out, scores),
        Command::Eval {
            pred,
            manifest,
            report,
        } => cmd_eval(&pred, &manifest, report),
        Command::Compare {
            manifest,
            rules,
            combos,
            out,
        } => cmd_compare(&manifest, &rules, &combos, &out),
        Command::Synth {
            seed,
            images,
            size: (height, width),
            classes,
            variants,
            out,
        } => {
            let config = SynthConfig {
                seed,
                images,
                height,
                width,
                num_classes: classes,
                variants,
            };
            cmd_synth(&config, &out)
        }
    }
}

fn parse_models(csv: &str, manifest: &Manifest) -> Result<Vec<String>> {
    let mut models: Vec<String> = Vec::new();
    for name in csv.split(',').map(str::trim) {
        manifest.model(name)?;
        if models.iter().any(|m| m == name) {
            return Err(Error::Duplicate {
                kind: "model",
                name: name.to_string(),
            });
        }
        models.push(name.to_string());
    }
    Ok(models)
}

fn cmd_fuse(
    manifest_path: &Path,
    rule: &str,
    models: &str,
    out: &Path,
    scores: bool,
) -> Result<String> {
    let manifest = load_manifest(manifest_path)?;
    let rule: FusionRule = rule.parse()?;
    let models = parse_models(models, &manifest)?;
    create_dir(out)?;

    let total = manifest.images.len();
    manifest
        .images
        .par_iter()
        .enumerate()
        .try_for_each(|(i, id)| -> Result<()> {
            let stack = load_stack(&manifest, &models, id)?;
            let fused = fused_scores(rule, &stack);
            let mask = argmax_decide(&fused);
            write_mask(&mask, out.join(format!("{id}.pgm")))?;
            if scores {
                let data: Vec<f32> = fused.scores().iter().map(|&s| s as f32).collect();
                write_tensor(fused.shape(), &data, out.join(format!("{id}.scores.npy")))?;
            }
            eprintln!("fused {id} (image {} of {total})", i + 1);
            Ok(())
        })?;

    Ok(json!({
        "command": "fuse",
        "rule": rule.id(),
        "models": models,
        "images": total,
        "out": out.display().to_string(),
        "scores": scores,
    })
    .to_string())
}

fn cmd_eval(pred: &Path, manifest_path: &Path, format: ReportFormat) -> Result<String> {
    let manifest = load_manifest(manifest_path)?;
    let missing: Vec<&str> = manifest
        .images
        .iter()
        .filter(|id| !pred.join(format!("{id}.pgm")).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "missing predictions for image ids: {}",
            missing.join(", ")
        )));
    }

    let c = manifest.num_classes();
    let per_image: Vec<ConfusionMatrix> = manifest
        .images
        .par_iter()
        .map(|id| {
            let predicted = read_mask(pred.join(format!("{id}.pgm")), c)?;
            let truth = read_mask(manifest.ground_truth_path(id), c)?;
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(id, &predicted, &truth)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut pooled = ConfusionMatrix::new(c);
    for cm in &per_image {
        pooled.merge(cm)?;
    }
    let report = pooled.report()?;
    Ok(match format {
        ReportFormat::Json => report.to_json().trim_end().to_string(),
        ReportFormat::Table => report
            .to_table(Some(manifest.classes.names()))
            .trim_end()
            .to_string(),
    })
}

fn cmd_compare(manifest_path: &Path, rules: &str, combos: &str, out: &Path) -> Result<String> {
    let manifest = load_manifest(manifest_path)?;
    let rules = parse_rules(rules)?;
    let combos = parse_combos(combos, &manifest)?;
    eprintln!(
        "evaluating {} rule(s) x {} combination(s) on {} image(s)",
        rules.len(),
        combos.len(),
        manifest.images.len()
    );
    let table = compare::evaluate(&manifest, &rules, &combos)?;
    let json_path = out.with_extension("json");
    write_atomic(out, table.to_markdown().as_bytes())?;
    write_atomic(&json_path, table.to_json().as_bytes())?;
    Ok(json!({
        "command": "compare",
        "markdown": out.display().to_string(),
        "json": json_path.display().to_string(),
        "rules": rules.iter().map(|r| r.id()).collect::<Vec<_>>(),
        "combos": combos.iter().map(|c| c.label.clone()).collect::<Vec<_>>(),
    })
    .to_string())
}

fn cmd_synth(config: &SynthConfig, out: &Path) -> Result<String> {
    config.validate()?;
    create_dir(out)?;
    eprintln!(
        "generating {} scene(s) of {}x{} with {} class(es)",
        config.images, config.height, config.width, config.num_classes
    );
    let manifest = write_dataset(config, out)?;
    Ok(json!({
        "command": "synth",
        "manifest": out.join("manifest.json").display().to_string(),
        "models": manifest.model_names().collect::<Vec<_>>(),
        "train_images": manifest.train_images.len(),
        "test_images": manifest.images.len(),
    })
    .to_string())
}
