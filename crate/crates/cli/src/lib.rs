//! Command-line front end. [`run`] takes its streams as arguments so the whole
//! CLI can be driven from tests.
//!
//! Exit codes: 0 success, 1 data or validation error (one line on stderr),
//! 2 usage error.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ckpt_bridge::bench::{self, Qps, RequestRecord, RunSummary};
use ckpt_bridge::cost::{self, CostInputs, CostRow};
use ckpt_bridge::layout::{map_name, Direction};
use ckpt_bridge::safetensors::{list_tensors, read_file, write_file};
use ckpt_bridge::schedule::{lr_at, ScheduleConfig};
use ckpt_bridge::sft::{self, ByteTokenizer, ChatTemplate, RawSample, Tokenizer, WhitespaceTokenizer};
use ckpt_bridge::shard::{self, Mesh, ParamNode, ShardingDoc};
use ckpt_bridge::{ArchDescriptor, DType, MergeConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ckpt-bridge",
    version,
    about = "LoRA merge, spec repair, SFT prep and cost tooling"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List tensors and metadata of a safetensors file
    Inspect {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Fold LoRA factors into a base checkpoint
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        lora: PathBuf,
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
        /// Output dtype; defaults to each tensor's base dtype
        #[arg(long)]
        dtype: Option<DType>,
        /// Overwrite an existing output file
        #[arg(long)]
        force: bool,
    },
    /// Translate module names between the JAX and HF namespaces (reads stdin
    /// when no names are given)
    MapNames {
        #[arg(long)]
        direction: Direction,
        names: Vec<String>,
    },
    /// Repair partition specs for a `<fsdp>x<tp>` mesh
    RepairSpecs {
        #[arg(long)]
        mesh: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that an architecture's projections split evenly over the mesh
    ValidateMesh {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        tp: usize,
        #[arg(long, default_value_t = 1)]
        fsdp: usize,
    },
    /// Clean, tokenize, mask and filter chat samples (JSON lines in and out)
    PrepData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_seq_len: usize,
        #[arg(long, value_enum, default_value_t = TokenizerKind::Whitespace)]
        tokenizer: TokenizerKind,
        #[arg(long, value_enum, default_value_t = TemplateKind::Gemma)]
        template: TemplateKind,
    },
    /// Learning rate at one step of a warmup + cosine schedule
    Lr {
        #[arg(long)]
        peak: f64,
        #[arg(long)]
        warmup: u64,
        #[arg(long)]
        total: u64,
        #[arg(long)]
        step: u64,
    },
    /// Summarize serving benchmark records (JSON lines) per QPS level
    BenchReport {
        #[arg(long = "in")]
        input: PathBuf,
        /// Hourly rate of the serving hardware in dollars
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = bench::DEFAULT_SATURATION_EPSILON)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Training, serving and total cost
    Cost {
        #[arg(long)]
        train_hours: f64,
        #[arg(long)]
        train_rate: f64,
        /// Training throughput in tokens per second
        #[arg(long)]
        throughput: f64,
        #[arg(long)]
        serve_rate: f64,
        /// Serving horizons in hours; repeat or comma-separate for several
        #[arg(long, value_delimiter = ',', required = true)]
        serve_hours: Vec<f64>,
        /// Peak serving throughput in tokens per second, for $/1M served
        #[arg(long)]
        serve_throughput: Option<f64>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TokenizerKind {
    Whitespace,
    Byte,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TemplateKind {
    Gemma,
    Bare,
}

/// Failure of a subcommand after argument parsing succeeded.
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Runs one command line. `args` includes the program name.
pub fn run<I, S>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, stdin, stdout) {
        Ok(()) => EXIT_OK,
        Err(Failure(msg)) => {
            let line = msg.replace('\n', " ");
            let _ = writeln!(stderr, "error: {line}");
            EXIT_DATA
        }
    }
}

fn dispatch(command: Command, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> CmdResult {
    match command {
        Command::Inspect { file, format } => inspect(&file, format, stdout),
        Command::Merge {
            base,
            lora,
            arch,
            alpha,
            rank,
            out,
            dtype,
            force,
        } => {
            if out.exists() && !force {
                return Err(Failure(format!("{} exists; pass --force to overwrite", out.display())));
            }
            let arch = ArchDescriptor::load(&arch)?;
            let base = read_file(&base)?;
            let lora = read_file(&lora)?;
            let pairs = ckpt_bridge::load_lora_factors(&lora, &arch)?;
            let cfg = MergeConfig {
                output_dtype: dtype,
                ..MergeConfig::new(alpha, rank)
            };
            let merged = ckpt_bridge::merge(&base, &pairs, &cfg, &arch)?;
            write_file(&merged, &out)?;
            writeln!(
                stdout,
                "merged {} LoRA pairs into {} tensors -> {}",
                pairs.len(),
                merged.len(),
                out.display()
            )?;
            Ok(())
        }
        Command::MapNames { direction, names } => {
            let names = if names.is_empty() {
                let mut from_stdin = Vec::new();
                for line in stdin.lines() {
                    let line = line?;
                    let line = line.trim();
                    if !line.is_empty() {
                        from_stdin.push(line.to_string());
                    }
                }
                from_stdin
            } else {
                names
            };
            for name in names {
                for mapped in map_name(&name, direction)? {
                    writeln!(stdout, "{mapped}")?;
                }
            }
            Ok(())
        }
        Command::RepairSpecs { mesh, input, out } => {
            let mesh = Mesh::parse_fsdp_tp(&mesh)?;
            let params = read_params(&input)?;
            let repaired = shard::repair_tree(&params, &mesh)?;
            let changed = params.iter().zip(&repaired).filter(|(a, b)| a.spec != b.spec).count();
            let doc = ShardingDoc { mesh, params: repaired };
            let mut text = serde_json::to_string_pretty(&doc)?;
            text.push('\n');
            fs::write(&out, text).map_err(|e| Failure(format!("cannot write {}: {e}", out.display())))?;
            writeln!(
                stdout,
                "repaired {changed} of {} partition specs -> {}",
                doc.params.len(),
                out.display()
            )?;
            Ok(())
        }
        Command::ValidateMesh { arch, tp, fsdp } => {
            let arch = ArchDescriptor::load(&arch)?;
            let mesh = Mesh::fsdp_tp(fsdp, tp)?;
            let violations = shard::validate_mesh(&mesh, &arch);
            let params = arch.projection_param_count() as f64;
            for v in &violations {
                writeln!(stdout, "violation: {v}")?;
            }
            if violations.is_empty() {
                writeln!(
                    stdout,
                    "ok: fsdp={fsdp} tp={tp}, projection weights {:.2} GB per chip in bf16",
                    shard::memory_per_chip_gb(params, &mesh, 2.0)
                )?;
                Ok(())
            } else {
                Err(Failure(format!(
                    "{} mesh violation(s) for fsdp={fsdp} tp={tp}",
                    violations.len()
                )))
            }
        }
        Command::PrepData {
            input,
            out,
            max_seq_len,
            tokenizer,
            template,
        } => {
            let samples: Vec<RawSample> = read_json_lines(&input)?;
            let template = match template {
                TemplateKind::Gemma => ChatTemplate::default(),
                TemplateKind::Bare => ChatTemplate::bare(),
            };
            let tokenizer: &(dyn Tokenizer + Sync) = match tokenizer {
                TokenizerKind::Whitespace => &WhitespaceTokenizer,
                TokenizerKind::Byte => &ByteTokenizer,
            };
            let (kept, stats) = sft::prepare(&samples, tokenizer, &template, max_seq_len);
            let mut text = String::new();
            for (_, t) in &kept {
                text.push_str(&serde_json::to_string(t)?);
                text.push('\n');
            }
            fs::write(&out, text).map_err(|e| Failure(format!("cannot write {}: {e}", out.display())))?;
            writeln!(stdout, "{}", serde_json::to_string(&stats)?)?;
            Ok(())
        }
        Command::Lr {
            peak,
            warmup,
            total,
            step,
        } => {
            let cfg = ScheduleConfig {
                peak_lr: peak,
                warmup_steps: warmup,
                total_steps: total,
            };
            writeln!(stdout, "{:e}", lr_at(step, &cfg)?)?;
            Ok(())
        }
        Command::BenchReport {
            input,
            rate,
            epsilon,
            format,
        } => bench_report(&input, rate, epsilon, format, stdout),
        Command::Cost {
            train_hours,
            train_rate,
            throughput,
            serve_rate,
            serve_hours,
            serve_throughput,
            format,
        } => {
            let train = cost::training_cost(&CostInputs {
                hourly_rate: train_rate,
                wall_hours: train_hours,
                throughput_tok_s: throughput,
            })?;
            let serving = serve_throughput
                .map(|t| cost::serving_cost(serve_rate, t))
                .transpose()?;
            let totals: Vec<(f64, f64)> = serve_hours
                .iter()
                .map(|&h| Ok((h, cost::tco(&train, serve_rate, h)?)))
                .collect::<Result<_, Failure>>()?;
            match format {
                Format::Json => {
                    let doc = serde_json::json!({
                        "training": train,
                        "serving": serving,
                        "tco": totals.iter().map(|(h, t)| serde_json::json!({"serve_hours": h, "total": t})).collect::<Vec<_>>(),
                    });
                    writeln!(stdout, "{}", serde_json::to_string_pretty(&doc)?)?;
                }
                Format::Table => {
                    let mut rows = vec![CostRow {
                        label: "training",
                        report: train,
                    }];
                    if let Some(report) = serving {
                        rows.push(CostRow {
                            label: "serving",
                            report,
                        });
                    }
                    write!(stdout, "{}", cost::render_table(&rows))?;
                    writeln!(stdout)?;
                    writeln!(stdout, "| serve hours | total |\n|---:|---:|")?;
                    for (h, t) in totals {
                        writeln!(stdout, "| {h} | {t:.2} |")?;
                    }
                }
            }
            Ok(())
        }
    }
}

fn inspect(path: &Path, format: Format, stdout: &mut dyn Write) -> CmdResult {
    let file = read_file(path)?;
    let infos = list_tensors(&file);
    match format {
        Format::Json => {
            let tensors: Vec<serde_json::Value> = infos
                .iter()
                .map(|t| {
                    serde_json::json!({
                        "name": t.name, "dtype": t.dtype, "shape": t.shape, "byte_size": t.byte_size,
                    })
                })
                .collect();
            let doc = serde_json::json!({ "metadata": file.metadata(), "tensors": tensors });
            writeln!(stdout, "{}", serde_json::to_string_pretty(&doc)?)?;
        }
        Format::Table => {
            if let Some(meta) = file.metadata() {
                for (k, v) in meta {
                    writeln!(stdout, "# {k}: {v}")?;
                }
            }
            let mut total = 0;
            for t in &infos {
                writeln!(stdout, "{}\t{}\t{:?}\t{}", t.name, t.dtype, t.shape, t.byte_size)?;
                total += t.byte_size;
            }
            writeln!(stdout, "{} tensors, {total} bytes", infos.len())?;
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure(format!("cannot read {}: {e}", path.display())))
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| Failure(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(value);
    }
    Ok(out)
}

/// Accepts a bare array of params or an object with a `params` field.
fn read_params(path: &Path) -> Result<Vec<ParamNode>, Failure> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        List(Vec<ParamNode>),
        Wrapped { params: Vec<ParamNode> },
    }
    let text = read_text(path)?;
    let doc: Doc = serde_json::from_str(&text).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    Ok(match doc {
        Doc::List(p) | Doc::Wrapped { params: p } => p,
    })
}

fn bench_report(input: &Path, rate: f64, epsilon: f64, format: Format, stdout: &mut dyn Write) -> CmdResult {
    let records: Vec<RequestRecord> = read_json_lines(input)?;
    if records.is_empty() {
        return Err(Failure(format!("{}: no request records", input.display())));
    }
    let summaries: Vec<RunSummary> = bench::group_runs(&records)
        .iter()
        .map(|(_, run)| bench::summarize_run(run))
        .collect::<Result<_, _>>()?;
    let (peak_qps, peak) = bench::peak_throughput(&summaries)?;
    let sweep: Vec<RunSummary> = summaries.iter().filter(|s| !s.qps_target.is_burst()).cloned().collect();
    let saturation: Option<Qps> = if sweep.len() >= 2 {
        Some(bench::saturation_qps(&sweep, epsilon)?)
    } else {
        None
    };
    let serving = cost::serving_cost(rate, peak)?;

    match format {
        Format::Json => {
            let doc = serde_json::json!({
                "runs": summaries,
                "peak": { "qps_target": peak_qps, "output_throughput_tok_s": peak },
                "saturation_qps": saturation,
                "serving_cost": serving,
            });
            writeln!(stdout, "{}", serde_json::to_string_pretty(&doc)?)?;
        }
        Format::Table => {
            let mut out = String::from(
                "| QPS | requests | median TTFT ms | p99 ITL ms | median TPOT ms | output tok/s |\n|---:|---:|---:|---:|---:|---:|\n",
            );
            let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
            for s in &summaries {
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.2} | {} | {} | {:.1} |",
                    s.qps_target,
                    s.request_count,
                    s.median_ttft_ms,
                    opt(s.p99_itl_ms),
                    opt(s.median_tpot_ms),
                    s.output_throughput_tok_s
                );
            }
            let _ = writeln!(out, "\npeak: {peak:.1} tok/s at QPS {peak_qps}");
            if let Some(q) = saturation {
                let _ = writeln!(out, "saturation: QPS {q} (gain < {epsilon})");
            }
            out.push('\n');
            out.push_str(&cost::render_table(&[CostRow {
                label: "serving at peak",
                report: serving,
            }]));
            write!(stdout, "{out}")?;
        }
    }
    Ok(())
}
