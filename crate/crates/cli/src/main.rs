//! `tcattn`: render masks, print position tables, emit attention heatmaps,
//! check gradients and run sweeps/grids.
//!
//! Exit status: 0 success, 1 failed check, 2 bad input, 3 I/O error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use tc_attention::attention::{forward_with_plan, AttentionConfig, AttentionPlan, HeadTensor, PeMode};
use tc_attention::export::{ensure_dir, mask_csv, mask_image, matrix_csv, weights_image, write_atomic};
use tc_attention::gradcheck::check_all_modes;
use tc_attention::harness::model::check_model_gradients;
use tc_attention::harness::{ablation_grid, gamma_sweep, sweep_csv, TaskKind, TrialConfig, SWEEP_GAMMAS};
use tc_attention::layout::{adjusted_positions_with, build_layout, SequenceLayout, SuffixRule};
use tc_attention::masks::{build_mask_with, mask_stats, MaskKind, MaskOptions};
use tc_attention::{selftest, Execution, Real, Rng};

/// Default output directory for `heatmap` and `grid` when `--out` is absent.
const OUT_DIR_ENV: &str = "TCATTN_OUT_DIR";

#[derive(Parser)]
#[command(name = "tcattn", version, about = "Temporal-aware attention masks, positions and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an attention mask as PGM or CSV and print its allowed-entry count.
    RenderMask {
        /// Layout JSON, inline or a file path.
        #[arg(long)]
        layout: String,
        #[arg(long, value_parser = parse_mask_kind)]
        kind: MaskKind,
        /// Output file ending in .pgm or .csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fw_block_causal_within_frame: bool,
    },
    /// Print global id, role, temporal id and adjusted position per token.
    Positions {
        #[arg(long)]
        layout: String,
        #[arg(long, allow_hyphen_values = true)]
        gamma: Real,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        strict_monotonic_suffix: bool,
    },
    /// Write one attention-weight PGM per head for random (or given) Q/K/V.
    Heatmap {
        /// Heatmap JSON: {"layout": {...}, "attention": {...}}, inline or a file path.
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Q/K/V JSON {"q": [...], "k": [...], "v": [...]} in [heads][T][d_head] order.
        #[arg(long)]
        tensors: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the raw weights as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Check analytic attention and model gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        gamma: Real,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: Real,
        #[arg(long, default_value_t = 1e-3)]
        model_tolerance: Real,
    },
    /// Train one trial per gamma and print a CSV row per trial.
    Sweep {
        /// Trial JSON, inline or a file path.
        #[arg(long)]
        config: String,
        /// Comma separated gammas; defaults to 0.1,0.3,0.5,0.7,1.0,1.5,2.0.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        gammas: Option<Vec<Real>>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write full reports (wall time zeroed) as JSON.
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Run trials one after another instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Run a task x mask x pe-mode x seed grid and print a ranked summary.
    Grid {
        /// Grid JSON, inline or a file path.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the base config's step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Run trials one after another instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Run the invariant suite; exits 1 on the first failing check.
    Selftest,
}

#[derive(Debug)]
enum CliError {
    Check(String),
    Input(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Input(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Input(m) => write!(f, "invalid input: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<tc_attention::Error> for CliError {
    fn from(e: tc_attention::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Io(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn parse_mask_kind(s: &str) -> Result<MaskKind, String> {
    s.parse().map_err(|e: tc_attention::Error| e.to_string())
}

/// Inline JSON when the argument starts with `{`, otherwise a file path.
fn load_json<T: for<'de> Deserialize<'de>>(arg: &str) -> CliResult<T> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| io_err(Path::new(arg), e))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("bad JSON: {e}")))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    write_atomic(path, contents).map_err(|e| io_err(path, e))
}

fn out_dir(arg: Option<PathBuf>) -> PathBuf {
    arg.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::best_available()
    }
}

fn render_mask(layout: &str, kind: MaskKind, out: &Path, within_frame: bool) -> CliResult<()> {
    let layout: SequenceLayout = load_json(layout)?;
    let options = MaskOptions {
        fw_block_causal_within_frame: within_frame,
    };
    let mask = build_mask_with(kind, &layout, options);
    let contents = match out.extension().and_then(|e| e.to_str()) {
        Some("pgm") => mask_image(&mask).to_pgm_string(),
        Some("csv") => mask_csv(&mask),
        _ => {
            return Err(CliError::Input(format!(
                "output {} must end in .pgm or .csv",
                out.display()
            )))
        }
    };
    write_file(out, contents.as_bytes())?;
    println!("allowed_count {}", mask_stats(&mask).allowed_count);
    Ok(())
}

fn positions(layout: &str, gamma: Real, csv: bool, strict: bool) -> CliResult<()> {
    if !gamma.is_finite() {
        return Err(CliError::Input(format!("gamma must be finite, got {gamma}")));
    }
    let layout: SequenceLayout = load_json(layout)?;
    let table = adjusted_positions_with(&layout, gamma, SuffixRule::from_flag(strict))?;
    let rows: Vec<[String; 5]> = (0..layout.len())
        .map(|n| {
            let role = layout.role(n);
            let (name, frame) = match role.frame() {
                Some(f) => ("visual", f.to_string()),
                None if n < layout.prefix_len() => ("text_prefix", String::new()),
                None => ("text_suffix", String::new()),
            };
            [
                n.to_string(),
                name.to_string(),
                frame,
                table.temporal_ids()[n].to_string(),
                table.adjusted()[n].to_string(),
            ]
        })
        .collect();
    let header = ["n", "role", "frame", "temporal_id", "adjusted"];
    if csv {
        println!("{}", header.join(","));
        for r in &rows {
            println!("{}", r.join(","));
        }
    } else {
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: Vec<&str>| -> String {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        println!("{}", line(header.to_vec()));
        for r in &rows {
            println!("{}", line(r.iter().map(String::as_str).collect()));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeatmapConfig {
    layout: SequenceLayout,
    attention: AttentionConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorFile {
    q: Vec<Real>,
    k: Vec<Real>,
    v: Vec<Real>,
}

fn heatmap(config: &str, seed: u64, tensors: Option<PathBuf>, out: &Path, csv: bool) -> CliResult<()> {
    let cfg: HeatmapConfig = load_json(config)?;
    let plan = AttentionPlan::new(&cfg.layout, &cfg.attention)?;
    let (heads, t, d) = (cfg.attention.num_heads, cfg.layout.len(), cfg.attention.d_head);
    let (q, k, v) = match tensors {
        Some(path) => {
            let f: TensorFile = load_json(path.to_str().ok_or_else(|| CliError::Input("non-utf8 path".into()))?)?;
            (
                HeadTensor::from_vec(heads, t, d, f.q)?,
                HeadTensor::from_vec(heads, t, d, f.k)?,
                HeadTensor::from_vec(heads, t, d, f.v)?,
            )
        }
        None => {
            let mut rng = Rng::seeded(seed);
            (
                HeadTensor::random(heads, t, d, &mut rng),
                HeadTensor::random(heads, t, d, &mut rng),
                HeadTensor::random(heads, t, d, &mut rng),
            )
        }
    };
    let result = forward_with_plan(&q, &k, &v, &plan, Execution::Sequential)?;
    ensure_dir(out).map_err(|e| io_err(out, e))?;
    for (h, w) in result.weights.iter().enumerate() {
        let path = out.join(format!("head_{h}.pgm"));
        write_file(&path, weights_image(w).to_pgm_string().as_bytes())?;
        println!("{}", path.display());
        if csv {
            let path = out.join(format!("head_{h}.csv"));
            write_file(&path, matrix_csv(w).as_bytes())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn gradcheck(seed: u64, gamma: Real, tolerance: Real, model_tolerance: Real) -> CliResult<()> {
    if !gamma.is_finite() {
        return Err(CliError::Input(format!("gamma must be finite, got {gamma}")));
    }
    let layout = build_layout(1, 2, 3, 1)?;
    let reports = check_all_modes(&layout, 2, 4, gamma, seed)?;
    let mut first_failure = None;
    let mut worst: Real = 0.0;
    for r in &reports {
        let ok = r.passes(tolerance);
        println!(
            "{} {:<32} max_rel_error {:.3e} at {}",
            if ok { "PASS" } else { "FAIL" },
            r.label,
            r.max_rel_error,
            r.worst
        );
        worst = worst.max(r.max_rel_error);
        if !ok && first_failure.is_none() {
            first_failure = Some(format!("{} at {}", r.label, r.worst));
        }
    }
    println!("max relative error {worst:.3e} (tolerance {tolerance:e})");
    let model = check_model_gradients(seed)?;
    let model_ok = model.passes(model_tolerance);
    println!(
        "{} tiny model ({} parameters) max_rel_error {:.3e} (tolerance {model_tolerance:e})",
        if model_ok { "PASS" } else { "FAIL" },
        model.checked,
        model.max_rel_error
    );
    if !model_ok && first_failure.is_none() {
        first_failure = Some(format!("tiny model at {}", model.worst));
    }
    match first_failure {
        Some(f) => Err(CliError::Check(f)),
        None => Ok(()),
    }
}

struct SweepArgs {
    gammas: Option<Vec<Real>>,
    out: Option<PathBuf>,
    reports: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<usize>,
    sequential: bool,
}

fn sweep(config: &str, args: SweepArgs) -> CliResult<()> {
    let SweepArgs {
        gammas,
        out,
        reports: reports_path,
        seed,
        steps,
        sequential,
    } = args;
    let mut base: TrialConfig = load_json(config)?;
    base.seed = seed.unwrap_or(base.seed);
    base.steps = steps.unwrap_or(base.steps);
    let gammas = gammas.unwrap_or_else(|| SWEEP_GAMMAS.to_vec());
    if let Some(g) = gammas.iter().find(|g| !g.is_finite()) {
        return Err(CliError::Input(format!("gamma must be finite, got {g}")));
    }
    let reports = gamma_sweep(&base, &gammas, execution(sequential))?;
    let csv = sweep_csv(&reports);
    match out {
        Some(path) => write_file(&path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    if let Some(path) = reports_path {
        write_file(&path, reports_json(&reports).as_bytes())?;
    }
    Ok(())
}

fn reports_json(reports: &[tc_attention::harness::TrialReport]) -> String {
    let lines: Vec<String> = reports.iter().map(|r| r.deterministic_json()).collect();
    format!("[\n{}\n]\n", lines.join(",\n"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    base: TrialConfig,
    #[serde(default = "all_tasks")]
    tasks: Vec<TaskKind>,
    #[serde(default = "all_masks")]
    mask_kinds: Vec<MaskKind>,
    #[serde(default = "all_pe_modes")]
    pe_modes: Vec<PeMode>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
}

fn all_tasks() -> Vec<TaskKind> {
    TaskKind::ALL.to_vec()
}
fn all_masks() -> Vec<MaskKind> {
    MaskKind::ALL.to_vec()
}
fn all_pe_modes() -> Vec<PeMode> {
    PeMode::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn grid(config: &str, out: &Path, steps: Option<usize>, sequential: bool) -> CliResult<()> {
    let mut cfg: GridConfig = load_json(config)?;
    cfg.base.steps = steps.unwrap_or(cfg.base.steps);
    let report = ablation_grid(
        &cfg.base,
        &cfg.tasks,
        &cfg.mask_kinds,
        &cfg.pe_modes,
        &cfg.seeds,
        execution(sequential),
    )?;
    ensure_dir(out).map_err(|e| io_err(out, e))?;
    let summary = report.render_summary();
    let cells: Vec<_> = report.cells.values().cloned().collect();
    write_file(&out.join("summary.txt"), summary.as_bytes())?;
    write_file(&out.join("summary.csv"), report.summary_csv().as_bytes())?;
    write_file(&out.join("cells.csv"), report.cells_csv().as_bytes())?;
    write_file(&out.join("reports.json"), reports_json(&cells).as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn run_selftest() -> CliResult<()> {
    let outcomes = selftest::run();
    for o in &outcomes {
        println!("{o}");
    }
    match outcomes.iter().find(|o| !o.passed) {
        Some(o) => Err(CliError::Check(format!("{}: {}", o.name, o.detail))),
        None => {
            println!("all {} checks passed", outcomes.len());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::RenderMask {
            layout,
            kind,
            out,
            fw_block_causal_within_frame,
        } => render_mask(&layout, kind, &out, fw_block_causal_within_frame),
        Command::Positions {
            layout,
            gamma,
            csv,
            strict_monotonic_suffix,
        } => positions(&layout, gamma, csv, strict_monotonic_suffix),
        Command::Heatmap {
            config,
            seed,
            tensors,
            out,
            csv,
        } => heatmap(&config, seed, tensors, &out_dir(out), csv),
        Command::Gradcheck {
            seed,
            gamma,
            tolerance,
            model_tolerance,
        } => gradcheck(seed, gamma, tolerance, model_tolerance),
        Command::Sweep {
            config,
            gammas,
            out,
            reports,
            seed,
            steps,
            sequential,
        } => sweep(
            &config,
            SweepArgs {
                gammas,
                out,
                reports,
                seed,
                steps,
                sequential,
            },
        ),
        Command::Grid {
            config,
            out,
            steps,
            sequential,
        } => grid(&config, &out_dir(out), steps, sequential),
        Command::Selftest => run_selftest(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tcattn: {e}");
            ExitCode::from(e.code())
        }
    }
}
