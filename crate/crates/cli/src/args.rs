use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use quept::{BitWidth, LossKind, MergeCase, RankPartition, SharingMode, TierPartition};

#[derive(Debug, Parser)]
#[command(name = "quept", version, about = "Elastic multi-bit post-training quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded toy transformer
    GenModel(GenModelArgs),
    /// Generate a seeded synthetic calibration set
    GenCalib(GenCalibArgs),
    /// Run block-wise multi-bit calibration
    Calibrate(CalibrateArgs),
    /// Select one bit configuration from a calibrated artifact
    Switch(SwitchArgs),
    /// Compare a deployable model against full precision
    Eval(EvalArgs),
    /// Run a controlled ablation study
    Ablate(AblateArgs),
    /// Allocate per-layer weight bits under an average-bit budget
    Allocate(AllocateArgs),
    /// Per-bit error and token divergence summary of an artifact
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    #[arg(long, default_value_t = 4)]
    pub mlp_ratio: usize,
}

#[derive(Debug, Args)]
pub struct GenCalibArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
}

/// Comma-separated bit-widths, e.g. `4,5,6,7,8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitList(pub Vec<BitWidth>);

fn parse_bits(s: &str) -> Result<BitList, String> {
    s.split(',')
        .map(|b| {
            let b: u32 = b.trim().parse().map_err(|e| format!("`{b}`: {e}"))?;
            BitWidth::new(b).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()
        .map(BitList)
}

fn parse_lambdas(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated weights".to_string())
}

/// Quantizer layout and optimizer settings shared by `calibrate` and `ablate`.
#[derive(Debug, Clone, Args)]
#[group(id = "calib_opts", multiple = true)]
pub struct CalibOpts {
    /// Target bit set; must equal the union of the tiers
    #[arg(long, value_parser = parse_bits)]
    pub bits: Option<BitList>,
    /// Tier partition `low/mid/high`
    #[arg(long, default_value = "4/5,6/7,8")]
    pub tiers: TierPartition,
    /// Rank increments `high,mid,low`
    #[arg(long, default_value = "4,4,4")]
    pub ranks: RankPartition,
    #[arg(long, default_value = "cascaded")]
    pub sharing: SharingMode,
    #[arg(long, default_value = "mae")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_adapter: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_clip: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "selective")]
    pub tome_case: MergeCase,
    #[arg(long, default_value_t = 0.5)]
    pub tome_p: f64,
    #[arg(long, value_parser = parse_lambdas)]
    pub tome_lambdas: Option<[f64; 3]>,
    /// Feed every block its full-precision input instead of merged features
    #[arg(long)]
    pub no_tome: bool,
    /// Quantize weights only
    #[arg(long)]
    pub weight_only: bool,
    /// Keep clip multipliers at 1
    #[arg(long)]
    pub freeze_clips: bool,
    #[arg(long, default_value_t = 0.999)]
    pub act_percentile: f64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, required_unless_present = "manifest")]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    pub calib: Option<PathBuf>,
    /// Re-run exactly the configuration recorded in a run manifest
    #[arg(long, conflicts_with_all = ["calib_opts", "model", "calib"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub opts: CalibOpts,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("selection").required(true).args(["uniform", "config", "full_precision"])))]
pub struct SwitchArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Quantize every layer at this bit-width
    #[arg(long)]
    pub uniform: Option<u32>,
    /// Per-layer bit config document
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub full_precision: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub deployable: PathBuf,
    /// Calibration-format data file
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Tome,
    Lora,
    Modules,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, value_enum)]
    pub study: Study,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: CalibOpts,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub avg_bits: f64,
    /// Bit config document to write
    #[arg(long)]
    pub out: PathBuf,
    /// Sensitivity table CSV to write
    #[arg(long)]
    pub sensitivity: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_calibration_options() {
        let cli = Cli::try_parse_from([
            "quept", "calibrate", "--model", "m", "--calib", "c", "--out-dir", "o", "--bits", "2,3,4",
            "--tiers", "2/3/4", "--tome-lambdas", "0.5,0.25,0.25", "--no-tome",
        ])
        .unwrap();
        let Command::Calibrate(a) = cli.command else { panic!("wrong command") };
        assert_eq!(a.opts.bits.unwrap().0, BitWidth::range(2, 4).unwrap());
        assert_eq!(a.opts.tome_lambdas, Some([0.5, 0.25, 0.25]));
        assert!(a.opts.no_tome);
    }

    #[test]
    fn manifest_excludes_other_options() {
        let with_opts = ["quept", "calibrate", "--manifest", "x.toml", "--out-dir", "o", "--steps", "3"];
        assert!(Cli::try_parse_from(with_opts).is_err());
        let plain = ["quept", "calibrate", "--manifest", "x.toml", "--out-dir", "o"];
        assert!(Cli::try_parse_from(plain).is_ok());
        assert!(Cli::try_parse_from(["quept", "calibrate", "--model", "m", "--out-dir", "o"]).is_err());
    }

    #[test]
    fn rejects_bad_lists() {
        assert!(parse_bits("4,x").is_err());
        assert!(parse_bits("9").is_err());
        assert!(parse_lambdas("1,2").is_err());
    }
}
