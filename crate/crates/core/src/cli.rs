//! Command-line front end. `run` holds all logic so it can be driven from
//! tests; the `qmix` binary only maps its result to an exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codegen::{emit_program, Dialect, KernelCache};
use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::graph::store::write_atomic;
use crate::graph::{apply_precision, plan_memory, validate, GraphSpec, MemoryPlan, Model, Net};
use crate::quant::QuantMode;
use crate::tensor::{element_count, Tensor};

#[derive(Debug, Parser)]
#[command(name = "qmix", version, about = "Mixed-precision quantized inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run calibration samples in OBSERVE mode and write the calibrated model.
    Observe(ObserveArgs),
    /// Run inference at a chosen precision and write per-sample CSV.
    Infer(InferArgs),
    /// Print the blob memory plan with and without reuse.
    MemPlan(MemPlanArgs),
    /// Emit a kernel program and print its content hash.
    EmitKernel(EmitArgs),
}

#[derive(Debug, Args)]
pub struct ObserveArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Starting weights; the graph's fillers are used when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Calibration samples, one per CSV row.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output model path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// fp32, fp16, int16 or int8; rewrites every layer's types.
    #[arg(long)]
    pub precision: Option<DataType>,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also save the model with parameters at the selected precision.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MemPlanArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub precision: Option<DataType>,
    /// Show only the plan with (true) or without (false) reuse.
    #[arg(long)]
    pub reuse: Option<bool>,
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    #[arg(long, default_value = "relu")]
    pub op: String,
    #[arg(long = "precision", alias = "dtype")]
    pub precision: DataType,
    #[arg(long)]
    pub dialect: Dialect,
    #[arg(long)]
    pub out: PathBuf,
    /// Kernel cache file to consult and update.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command,
/// writing machine-readable output to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            return Ok(write!(stdout, "{e}")?);
        }
        Err(e) => return Err(Error::InvalidParam(e.to_string())),
    };
    match cli.command {
        Command::Observe(a) => observe(&a, stdout),
        Command::Infer(a) => infer(&a, stdout),
        Command::MemPlan(a) => mem_plan(&a, stdout),
        Command::EmitKernel(a) => emit_kernel(&a, stdout),
    }
}

/// Reads one sample per row. A first row that does not parse as numbers
/// is taken as a header.
pub fn read_samples(path: &Path) -> Result<Vec<Vec<f32>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(file);
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f32>, _> = rec.iter().map(str::parse::<f32>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Format(format!("{} row {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(rows)
}

/// Stacks rows into the net's single input, batch-major.
fn input_batch(net: &Net, rows: &[Vec<f32>]) -> Result<(String, Tensor)> {
    let names = net.input_names();
    let [name] = names.as_slice() else {
        return Err(Error::Unsupported(format!("CSV input needs a single-input graph, got {}", names.len())));
    };
    let mut shape = net.graph().shapes[name].clone();
    let per = element_count(&shape[1..]);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != per) {
        return Err(Error::ShapeMismatch(format!("row {} has {} values, input '{name}' needs {per}", i + 1, r.len())));
    }
    shape[0] = rows.len();
    let flat: Vec<f32> = rows.concat();
    let dtype = net.spec().layers.iter().find(|l| l.tops.contains(name)).expect("input layer").top_data_type;
    Ok((name.clone(), Tensor::from_f32_with(dtype, &shape, &flat)?))
}

fn observe(a: &ObserveArgs, stdout: &mut dyn Write) -> Result<()> {
    let spec = GraphSpec::load(&a.graph)?;
    let model = a.model.as_ref().map(Model::load).transpose()?;
    let rows = read_samples(&a.input)?;
    if rows.is_empty() {
        return Err(Error::NoCalibrationData);
    }
    let mut net = Net::new(&spec, model.as_ref(), a.seed)?;
    net.set_quant_mode(QuantMode::Observe)?;
    let (name, batch) = input_batch(&net, &rows)?;
    net.forward(&[(name, batch)].into_iter().collect())?;
    let m = net.model();
    m.save(&a.out)?;
    for (blob, r) in &m.ranges {
        writeln!(stdout, "{blob},{},{}", r.seen_min, r.seen_max)?;
    }
    Ok(())
}

fn infer(a: &InferArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut spec = GraphSpec::load(&a.graph)?;
    if let Some(p) = a.precision {
        spec = apply_precision(&spec, p);
    }
    let model = a.model.as_ref().map(Model::load).transpose()?;
    let mut net = Net::new(&spec, model.as_ref(), a.seed)?;
    net.set_quant_mode(QuantMode::Quantized)?;
    let rows = read_samples(&a.input)?;
    if rows.is_empty() {
        return Err(Error::MissingInput("no samples".into()));
    }
    let (name, batch) = input_batch(&net, &rows)?;
    let outputs = net.infer(&[(name, batch)].into_iter().collect())?;

    let mut csv = String::new();
    let per_sample: Vec<Vec<f32>> = outputs.values().map(Tensor::to_f32_vec).collect();
    for s in 0..rows.len() {
        csv.push_str(&s.to_string());
        for (t, vals) in outputs.values().zip(&per_sample) {
            let n = t.sample_len();
            for v in &vals[s * n..(s + 1) * n] {
                csv.push_str(&format!(",{v}"));
            }
        }
        csv.push('\n');
    }
    if let Some(path) = &a.save_model {
        net.model().save(path)?;
    }
    match &a.out {
        Some(path) => write_atomic(path, csv.as_bytes()),
        None => Ok(stdout.write_all(csv.as_bytes())?),
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn mem_plan(a: &MemPlanArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut spec = GraphSpec::load(&a.graph)?;
    if let Some(p) = a.precision {
        spec = apply_precision(&spec, p);
    }
    let g = validate(&spec).into_result()?;
    let show = |p: &MemoryPlan, out: &mut dyn Write| -> Result<()> { Ok(out.write_all(p.table().as_bytes())?) };
    match a.reuse {
        Some(r) => show(&plan_memory(&g, r), stdout),
        None => {
            let off = plan_memory(&g, false);
            let on = plan_memory(&g, true);
            show(&off, stdout)?;
            show(&on, stdout)?;
            let d = gcd(off.peak_bytes, on.peak_bytes).max(1);
            let saved = 100.0 * (1.0 - on.peak_bytes as f64 / off.peak_bytes.max(1) as f64);
            writeln!(stdout, "ratio {}:{} ({saved:.1}% saved)", off.peak_bytes / d, on.peak_bytes / d)?;
            Ok(())
        }
    }
}

fn emit_kernel(a: &EmitArgs, stdout: &mut dyn Write) -> Result<()> {
    let program = emit_program(&a.op, a.precision, a.dialect)?;
    if let Some(path) = &a.cache {
        let mut cache = KernelCache::open(path)?;
        cache.get_or_build(&program);
    }
    write_atomic(&a.out, program.source.as_bytes())?;
    writeln!(stdout, "{}", program.hash_hex())?;
    Ok(())
}

/// One-line rendering of an error for the terminal.
pub fn one_line(e: &Error) -> String {
    let text = e.to_string();
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let first = lines.next().unwrap_or_default().to_string();
    let rest: Vec<&str> = lines.collect();
    match (rest.is_empty(), first.ends_with(':')) {
        (true, _) => first,
        (false, true) => format!("{first} {}", rest.join("; ")),
        (false, false) => format!("{first}; {}", rest.join("; ")),
    }
}
