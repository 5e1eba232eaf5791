use std::path::PathBuf;
use std::process::ExitCode;

use choroid_cli::commands::{self, PhantomKind};
use clap::{Parser, Subcommand};

/// OCT choroid analysis: segmentation, en-face projection, shadow localization and removal.
#[derive(Debug, Parser)]
#[command(name = "choroid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic phantoms with exact ground truth.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PhantomKind::Bscan)]
        kind: PhantomKind,
        /// TOML phantom configuration; defaults to the desk-scale phantom.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 20)]
        n_test: usize,
    },
    /// Train the biomarker (thickness) network on choroid masks.
    TrainBiomarker {
        #[arg(long)]
        config: Option<PathBuf>,
        /// B-scan dataset written by `phantom`; phantoms are generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the choroid segmentation network.
    TrainBionet {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model variant; overrides the config.
        #[arg(long, value_parser = ["baseline", "gms", "bio", "full", "gms-only"])]
        ablation: Option<String>,
        /// Trained biomarker checkpoint, required by the `bio` and `full` variants.
        #[arg(long)]
        biomarker: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the en-face shadow segmenter.
    TrainShadowSeg {
        #[arg(long)]
        config: Option<PathBuf>,
        /// En-face dataset written by `phantom --kind enface`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage of the shadow inpainting model.
    TrainDeshadow {
        #[arg(long, value_parser = ["edge", "inpaint", "joint"])]
        stage: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint holding the earlier stages.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment the choroid in a volume or a single B-scan PNG.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project a volume to en-face RPE and choroid images using a segmentation directory.
    Enface {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Locate vessel shadows in an en-face RPE image.
    LocateShadows {
        #[arg(long)]
        rpe: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove shadows from an en-face choroid image.
    Deshadow {
        #[arg(long)]
        choroid: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth.
    EvaluateSeg {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score shadow removal on an en-face dataset with its true shadow masks.
    EvaluateInpaint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline from a TOML config or a previous manifest.json.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare the segmentation variants over several seeds.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig {
        #[arg(value_parser = ["pipeline", "ablation"], default_value = "pipeline")]
        which: String,
    },
}

fn run(cli: Cli) -> choroid::Result<()> {
    use Command::*;
    match cli.command {
        Phantom { out, kind, config, seed, n_train, n_test } => commands::phantom(&out, kind, config.as_deref(), seed, n_train, n_test),
        TrainBiomarker { config, data, out } => commands::train_biomarker(config.as_deref(), data.as_deref(), &out),
        TrainBionet { config, data, ablation, biomarker, out } => {
            commands::train_bionet(config.as_deref(), data.as_deref(), ablation.as_deref(), biomarker.as_deref(), &out)
        }
        TrainShadowSeg { config, data, out } => commands::train_shadow_seg(config.as_deref(), data.as_deref(), &out),
        TrainDeshadow { stage, config, data, init, out } => commands::train_deshadow(&stage, config.as_deref(), data.as_deref(), init.as_deref(), &out),
        Segment { input, model, out } => commands::segment(&input, &model, &out),
        Enface { input, seg, out } => commands::enface(&input, &seg, &out),
        LocateShadows { rpe, model, out } => commands::locate(&rpe, &model, &out),
        Deshadow { choroid, mask, model, out } => commands::deshadow(&choroid, &mask, &model, &out),
        EvaluateSeg { pred, gt, out } => commands::evaluate_seg(&pred, &gt, &out),
        EvaluateInpaint { data, model, out } => commands::evaluate_inpaint(&data, &model, &out),
        Pipeline { config, out } => commands::pipeline(config.as_deref(), &out),
        Ablation { config, out } => commands::ablation(config.as_deref(), &out),
        DefaultConfig { which } => {
            print!("{}", commands::default_config(&which));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
