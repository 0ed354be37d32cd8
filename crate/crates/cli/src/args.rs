use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "icm", version, about = "Edge-mask-guided learned image and video coding lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic labeled scenes (or one clip with --frames).
    Datagen(DatagenArgs),
    /// Build an edge mask from a label map and confidence sidecar.
    MaskGen(MaskGenArgs),
    /// Train a codec or a video representation.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Encode an image to a bitstream or decode one back.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Per-image metrics of trained codecs.
    Eval(EvalArgs),
    /// Train one masked codec per alpha at fixed lambda and evaluate each.
    RdCurve(RdCurveArgs),
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// HxW, e.g. 48x64 for 48 rows of 64 pixels.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Object count range, e.g. 2..5.
    #[arg(long, default_value = "2..5", value_parser = parse_range)]
    pub objects: (usize, usize),
    /// Write one clip of this many frames instead of independent scenes.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskMode {
    RegionUnion,
    Composite,
}

#[derive(Args, Debug)]
pub struct MaskParams {
    #[arg(long, value_parser = parse_unit)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = MaskMode::RegionUnion)]
    pub mode: MaskMode,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub low: f64,
    #[arg(long, default_value_t = 0.3)]
    pub high: f64,
    #[arg(long, default_value_t = 1)]
    pub dilate: usize,
}

#[derive(Args, Debug)]
pub struct MaskGenArgs {
    #[arg(long, required_unless_present = "data", requires = "conf")]
    pub labels: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub conf: Option<PathBuf>,
    /// Process every labels file of a datagen directory instead; --out is
    /// then a directory.
    #[arg(long, conflicts_with_all = ["labels", "conf"])]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub params: MaskParams,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum TrainCommand {
    Lic(TrainLicArgs),
    Nerv(TrainNervArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LicObjective {
    Human,
    Masked,
    Task,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NervObjective {
    Nerv,
    SaNerv,
}

#[derive(Args, Debug)]
pub struct Schedule {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = icm_core::trainer::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = icm_core::trainer::DEFAULT_BATCH)]
    pub batch: usize,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Training log CSV; defaults to the checkpoint path with a .csv suffix.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainLicArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub objective: LicObjective,
    #[arg(long, default_value_t = icm_core::trainer::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Threshold the masks were built with; stored in the checkpoint.
    #[arg(long, value_parser = parse_unit)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub schedule: Schedule,
}

#[derive(Args, Debug)]
pub struct TrainNervArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub objective: NervObjective,
    #[arg(long, default_value_t = icm_core::trainer::DEFAULT_BETA, value_parser = parse_unit)]
    pub beta: f64,
    #[arg(long, value_parser = parse_unit)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub schedule: Schedule,
}

#[derive(Subcommand, Debug)]
pub enum CodecCommand {
    Encode(EncodeArgs),
    Decode(DecodeArgs),
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference image; prints psnr=<dB> against it.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalOutput {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a (bpp, masked_psnr) scatter plot.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub ckpt_list: Vec<PathBuf>,
    /// Threshold for the in-mask metrics; defaults to each checkpoint's.
    #[arg(long, value_parser = parse_unit)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub output: EvalOutput,
}

#[derive(Args, Debug)]
pub struct RdCurveArgs {
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_unit)]
    pub alpha_list: Vec<f64>,
    #[arg(long, default_value_t = icm_core::trainer::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the per-alpha checkpoints in this directory.
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    #[command(flatten)]
    pub output: EvalOutput,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let a: usize = a.parse().map_err(|_| format!("bad lower bound in {s:?}"))?;
    let b: usize = b.parse().map_err(|_| format!("bad upper bound in {s:?}"))?;
    if a > b {
        return Err(format!("empty range {s:?}"));
    }
    Ok((a, b))
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{v} is outside [0, 1]"));
    }
    Ok(v)
}
