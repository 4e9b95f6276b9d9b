//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{attention_recall, RecallStats, RecallUnit, UnitRecall};
use crate::bench::{appendix_grid, run_benchmark, scale_geometry, BenchGeometry, LatencyReport, CSV_HEADER};
use crate::blockify::BlockShape;
use crate::error::{invalid, Error, Result};
use crate::rollout::{
    make_toy_denoiser, run_inference_observed, run_training_schedule_at, sample_grad_step, RecallProbe,
    RolloutConfig,
};
use crate::router::BlockMask;
use crate::tensor::{read_matrix, write_tensor, Tensor};
use crate::verify::{run_verify, Fault, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sparse-forcing", version, about = "Persistent block-sparse attention toolkit")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (rollout) or report file (bench, verify, recall).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate chunks with the toy denoiser and write frames plus a memory trace.
    Rollout(RolloutArgs),
    /// Time the sparse and dense attention paths.
    Bench(BenchArgs),
    /// Run the seeded oracle and invariant suites.
    Verify(VerifyArgs),
    /// Attention recall per (layer, head).
    Recall(RecallArgs),
}

fn parse_block_shape(s: &str) -> std::result::Result<BlockShape, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [b_t, b_h, b_w] => BlockShape::new(b_t, b_h, b_w).map_err(|e| e.to_string()),
        _ => Err("expected three comma-separated extents, e.g. 3,4,4".into()),
    }
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Number of chunks to generate.
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Denoise steps; the ladder is evenly spaced in (0, 1].
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    /// Explicit decreasing ladder, overriding --steps.
    #[arg(long, value_delimiter = ',')]
    pub timesteps: Option<Vec<f32>>,
    /// Fraction of local blocks each query block attends to.
    #[arg(long, default_value_t = 0.25)]
    pub topk: f64,
    /// Persistent capacity in frames.
    #[arg(long, default_value_t = 6)]
    pub capacity_frames: usize,
    /// Local window length in frames.
    #[arg(long, default_value_t = 6)]
    pub window_frames: usize,
    /// Frames per chunk.
    #[arg(long, default_value_t = 3)]
    pub chunk_frames: usize,
    /// Block extents b_t,b_h,b_w.
    #[arg(long, value_parser = parse_block_shape, default_value = "3,4,4")]
    pub block_shape: BlockShape,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Latent channels (the toy model width).
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Follow the training schedule: stop every chunk at a sampled step.
    #[arg(long)]
    pub train: bool,
    /// Also write per-call attention probabilities and masks under attention/.
    #[arg(long)]
    pub dump_attention: bool,
}

impl RolloutArgs {
    pub fn config(&self, seed: u64) -> RolloutConfig {
        RolloutConfig {
            num_frames: self.frames,
            timesteps: self
                .timesteps
                .clone()
                .unwrap_or_else(|| RolloutConfig::even_timesteps(self.steps)),
            topk_ratio: self.topk,
            capacity_frames: self.capacity_frames,
            window_frames: self.window_frames,
            block_shape: self.block_shape,
            chunk_frames: self.chunk_frames,
            height: self.height,
            width: self.width,
            dim: self.dim,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// The single geometry given by the flags.
    Single,
    /// The 24-row kernel benchmark table.
    Appendix,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Grid::Single)]
    pub grid: Grid,
    /// Divide N_C by this, rounding down to whole blocks.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    /// Timed repetitions after warm-up.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.0625)]
    pub topk: f64,
    /// Current-chunk tokens N_C.
    #[arg(long, default_value_t = 5376)]
    pub n_c: usize,
    /// N_L / N_C.
    #[arg(long, default_value_t = 2.0)]
    pub local_ratio: f64,
    /// N_P / N_L.
    #[arg(long, default_value_t = 0.25)]
    pub persist_ratio: f64,
    /// Head dimension.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Tokens per block.
    #[arg(long, default_value_t = 48)]
    pub block_tokens: usize,
}

impl BenchArgs {
    pub fn geometries(&self, seed: u64) -> Vec<BenchGeometry> {
        let base = BenchGeometry {
            topk_ratio: self.topk,
            n_c: self.n_c,
            local_ratio: self.local_ratio,
            persist_ratio: self.persist_ratio,
            d: self.d,
            n_heads: self.heads,
            reps: self.reps,
            block_tokens: self.block_tokens,
            seed,
        };
        let rows = match self.grid {
            Grid::Single => vec![base],
            Grid::Appendix => appendix_grid()
                .into_iter()
                .map(|g| BenchGeometry {
                    d: base.d,
                    n_heads: base.n_heads,
                    reps: base.reps,
                    block_tokens: base.block_tokens,
                    seed,
                    ..g
                })
                .collect(),
        };
        rows.iter()
            .map(|g| if self.scale > 1 { scale_geometry(g, self.scale) } else { *g })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    DropSink,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Seeds per randomized suite.
    #[arg(long, default_value_t = 200)]
    pub seeds: usize,
    /// Test-only negative control.
    #[arg(long, value_enum, hide = true)]
    pub fault: Option<FaultArg>,
}

#[derive(Debug, Args)]
pub struct RecallArgs {
    /// Directory of `<unit>.probs.pbt` / `<unit>.mask.json` pairs, e.g. the
    /// attention/ folder of `rollout --dump-attention`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Without --input, run a toy rollout and score these ratios on it.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.125,0.0625")]
    pub topk: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(&cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Rollout(a) => cmd_rollout(cli, a, stdout),
        Command::Bench(a) => cmd_bench(cli, a, stdout, stderr),
        Command::Verify(a) => cmd_verify(cli, a, stdout),
        Command::Recall(a) => cmd_recall(cli, a, stdout),
    }
}

/// Writes `text` to `--out` when given, else to stdout.
fn emit(cli: &Cli, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match &cli.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?;
        }
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_rollout(cli: &Cli, a: &RolloutArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = a.config(cli.seed);
    cfg.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("rollout-out"));
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let dump = if a.dump_attention {
        let dir = out.join("attention");
        fs::create_dir_all(&dir)?;
        Some(dir)
    } else {
        None
    };

    let model = make_toy_denoiser(cli.seed);
    let mut probe = RecallProbe::new(vec![cfg.topk_ratio], dump);
    let (frames, trace, s) = if a.train {
        let s = sample_grad_step(cfg.seed, cfg.steps());
        let t = run_training_schedule_at(&cfg, &model, s, &mut probe)?;
        (t.frames, t.trace, Some(s))
    } else {
        let r = run_inference_observed(&cfg, &model, &mut probe)?;
        (r.frames, r.trace, None)
    };
    probe.stats()?;

    for (i, f) in frames.into_iter().enumerate() {
        write_tensor(frames_dir.join(format!("chunk_{i:04}.pbt")), &Tensor::Latent(f))?;
    }
    let mut file = fs::File::create(out.join("trace.jsonl"))?;
    trace.write_jsonl(&mut file)?;
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;

    let summary = match cli.format {
        Format::Csv => format!(
            "frames,denoise_calls,cache_updates,grad_step\n{},{},{},{}\n",
            cfg.num_frames,
            trace.denoise_calls(),
            trace.cache_updates(),
            s.map_or(String::new(), |s| s.to_string())
        ),
        Format::Json => format!(
            "{}\n",
            serde_json::json!({
                "frames": cfg.num_frames,
                "denoise_calls": trace.denoise_calls(),
                "cache_updates": trace.cache_updates(),
                "grad_step": s,
            })
        ),
    };
    stdout.write_all(summary.as_bytes())?;
    Ok(EXIT_OK)
}

pub fn bench_report(reports: &[LatencyReport], format: Format) -> String {
    match format {
        Format::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for r in reports {
                s.push_str(&r.csv_row());
                s.push('\n');
            }
            s
        }
        Format::Json => {
            let rows: Vec<_> = reports.iter().map(LatencyReport::json_row).collect();
            format!("{}\n", serde_json::Value::Array(rows))
        }
    }
}

fn cmd_bench(cli: &Cli, a: &BenchArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let geoms = a.geometries(cli.seed);
    for g in &geoms {
        g.validate()?;
    }
    let mut reports = Vec::with_capacity(geoms.len());
    for g in &geoms {
        let r = run_benchmark(g)?;
        for w in &r.warnings {
            writeln!(stderr, "warning: n_kv={} topk={}: {w}", r.lengths.n_kv, g.topk_ratio)?;
        }
        reports.push(r);
    }
    emit(cli, &bench_report(&reports, cli.format), stdout)?;
    Ok(EXIT_OK)
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs, stdout: &mut dyn Write) -> Result<i32> {
    let report = run_verify(&VerifyOptions {
        seeds: a.seeds,
        base_seed: cli.seed,
        fault: a.fault.map(|FaultArg::DropSink| Fault::DropSink),
    });
    let text = match cli.format {
        Format::Csv => report.to_string(),
        Format::Json => format!("{}\n", serde_json::to_string(&report)?),
    };
    emit(cli, &text, stdout)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFY })
}

/// `L{l}H{h}...` → `(l, h)`.
fn parse_unit(stem: &str) -> Option<(usize, usize)> {
    let rest = stem.strip_prefix('L')?;
    let (l, rest) = rest.split_once('H')?;
    let h: String = rest.chars().take_while(char::is_ascii_digit).collect();
    Some((l.parse().ok()?, h.parse().ok()?))
}

/// Loads every probs/mask pair under `dir`.
pub fn load_recall_inputs(dir: &Path) -> Result<Vec<RecallUnit>> {
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".probs.pbt").map(str::to_owned))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(invalid(format!("no *.probs.pbt files in {}", dir.display())));
    }
    stems
        .iter()
        .enumerate()
        .map(|(i, stem)| {
            let probs = read_matrix(dir.join(format!("{stem}.probs.pbt")))?;
            let mask_path = dir.join(format!("{stem}.mask.json"));
            let mask: BlockMask = serde_json::from_slice(
                &fs::read(&mask_path).map_err(|e| invalid(format!("{}: {e}", mask_path.display())))?,
            )?;
            let (layer, head) = parse_unit(stem).unwrap_or((0, i));
            Ok(RecallUnit { layer, head, probs, mask })
        })
        .collect()
}

fn recall_report(rows: &[(Option<f64>, RecallStats)], format: Format) -> String {
    let topk = |t: Option<f64>| t.map_or(String::new(), |t| t.to_string());
    match format {
        Format::Csv => {
            let mut s = String::from("topk,layer,head,recall\n");
            for (t, stats) in rows {
                for u in &stats.per_unit {
                    s.push_str(&format!("{},{},{},{:.6}\n", topk(*t), u.layer, u.head, u.recall));
                }
                s.push_str(&format!("{},mean,std,{:.6} ± {:.6}\n", topk(*t), stats.mean, stats.std));
            }
            s
        }
        Format::Json => {
            let rows: Vec<_> = rows
                .iter()
                .map(|(t, stats)| serde_json::json!({ "topk": t, "mean": stats.mean, "std": stats.std, "per_unit": stats.per_unit }))
                .collect();
            format!("{}\n", serde_json::Value::Array(rows))
        }
    }
}

fn cmd_recall(cli: &Cli, a: &RecallArgs, stdout: &mut dyn Write) -> Result<i32> {
    let rows = if let Some(dir) = &a.input {
        if !dir.is_dir() {
            return Err(invalid(format!("input directory {} does not exist", dir.display())));
        }
        let units = load_recall_inputs(dir)?;
        // repeated files of one unit are averaged
        let calls: Vec<UnitRecall> = attention_recall(&units)?.per_unit;
        vec![(None, crate::rollout::recall_by_unit(&calls))]
    } else {
        let cfg = RolloutConfig {
            num_frames: a.frames,
            timesteps: RolloutConfig::even_timesteps(a.steps),
            topk_ratio: *a.topk.first().ok_or_else(|| Error::Config("--topk needs a value".into()))?,
            seed: cli.seed,
            ..RolloutConfig::default()
        };
        let mut probe = RecallProbe::new(a.topk.clone(), None);
        run_inference_observed(&cfg, &make_toy_denoiser(cli.seed), &mut probe)?;
        probe.stats()?.into_iter().map(|(t, s)| (Some(t), s)).collect()
    };
    emit(cli, &recall_report(&rows, cli.format), stdout)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("sparse-forcing").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run_args(&["rollout", "--bogus"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("rollout") && out.contains("bench"));
    }

    #[test]
    fn zero_frames_names_invariant() {
        let (code, _, err) = run_args(&["rollout", "--frames", "0"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("num_frames"));
    }

    #[test]
    fn block_shape_parser() {
        assert_eq!(parse_block_shape("1,8,8").unwrap(), BlockShape { b_t: 1, b_h: 8, b_w: 8 });
        assert!(parse_block_shape("1,8").is_err());
        assert!(parse_block_shape("0,8,8").is_err());
    }

    #[test]
    fn unit_names() {
        assert_eq!(parse_unit("L1H0_f0002_s4"), Some((1, 0)));
        assert_eq!(parse_unit("L12H3"), Some((12, 3)));
        assert_eq!(parse_unit("probs"), None);
    }

    #[test]
    fn recall_missing_input() {
        assert_eq!(run_args(&["recall", "--input", "/nonexistent/dir"]).0, EXIT_USAGE);
    }
}
