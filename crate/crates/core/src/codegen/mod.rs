//! Kernel source generation for OpenCL and CUDA dialects.
//!
//! Programs are assembled from a setup preamble, a type header, a function
//! signature, a grid-stride loop and a body. Nothing is compiled; the
//! [`cache`] stores a canonical copy of the source in place of a device
//! binary, and [`interp`] executes emitted bodies for verification.

pub mod cache;
pub mod interp;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dtype::{derive_wide_types, DataType, WideType};
use crate::error::{Error, Result};

pub use cache::{canonical_blob, KernelCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dialect {
    #[serde(rename = "OPENCL")]
    OpenCl,
    #[serde(rename = "CUDA")]
    Cuda,
}

impl Dialect {
    pub fn tag(self) -> u8 {
        match self {
            Dialect::OpenCl => 0,
            Dialect::Cuda => 1,
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dialect::OpenCl => "opencl",
            Dialect::Cuda => "cuda",
        })
    }
}

impl FromStr for Dialect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "opencl" | "cl" => Ok(Dialect::OpenCl),
            "cuda" | "cu" => Ok(Dialect::Cuda),
            _ => Err(Error::Unsupported(format!("dialect '{s}'"))),
        }
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct ArgFlags: u8 {
        const CONST = 1;
        const GLOBAL_MEM = 1 << 1;
        const LOCAL_MEM = 1 << 2;
    }
}

/// Argument types, either one of the program's type aliases or a fixed
/// width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArgType {
    UintTp,
    Int8,
    Dtype,
    MItype,
    MOtype,
    Difftype,
    Acctype,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KernelArg {
    pub name: String,
    pub ty: ArgType,
    pub flags: ArgFlags,
}

impl KernelArg {
    pub fn new(name: &str, ty: ArgType, flags: ArgFlags) -> Self {
        KernelArg { name: name.to_string(), ty, flags }
    }

    pub fn is_pointer(&self) -> bool {
        self.flags.intersects(ArgFlags::GLOBAL_MEM | ArgFlags::LOCAL_MEM)
    }
}

/// The three layer types a program is specialized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelTypes {
    pub compute: DataType,
    pub input: DataType,
    pub output: DataType,
    /// Whether the target has 64-bit integer vectors (selects Multtype).
    pub prefer_wide: bool,
}

impl KernelTypes {
    pub fn uniform(dtype: DataType) -> Self {
        KernelTypes { compute: dtype, input: dtype, output: dtype, prefer_wide: true }
    }

    /// Concrete C type of an argument type.
    pub fn c_type(&self, ty: ArgType) -> &'static str {
        let wide = derive_wide_types(self.input);
        match ty {
            ArgType::UintTp => "uint32_t",
            ArgType::Int8 => "int8_t",
            ArgType::Dtype => dtype_c_name(self.compute),
            ArgType::MItype => dtype_c_name(self.input),
            ArgType::MOtype => dtype_c_name(self.output),
            ArgType::Difftype => wide_c_name(wide.difftype),
            ArgType::Acctype => wide_c_name(wide.acctype),
        }
    }
}

pub fn dtype_c_name(dtype: DataType) -> &'static str {
    match dtype {
        DataType::Fp32 => "float",
        DataType::Fp16 => "half",
        DataType::Int8Q => "uint8_t",
        DataType::Int16Q => "uint16_t",
    }
}

pub fn wide_c_name(w: WideType) -> &'static str {
    match w {
        WideType::Fp32 => "float",
        WideType::Fp16 => "half",
        WideType::S16 => "int16_t",
        WideType::S32 => "int32_t",
        WideType::S64 => "int64_t",
    }
}

/// Fixed-width integer typedefs, `uint_tp` and, where needed, half support.
pub fn setup_preamble(dialect: Dialect, half: bool) -> String {
    let mut s = String::new();
    let ints: [(&str, &str); 8] = match dialect {
        Dialect::OpenCl => [
            ("char", "int8_t"),
            ("uchar", "uint8_t"),
            ("short", "int16_t"),
            ("ushort", "uint16_t"),
            ("int", "int32_t"),
            ("uint", "uint32_t"),
            ("long", "int64_t"),
            ("ulong", "uint64_t"),
        ],
        Dialect::Cuda => [
            ("signed char", "int8_t"),
            ("unsigned char", "uint8_t"),
            ("short", "int16_t"),
            ("unsigned short", "uint16_t"),
            ("int", "int32_t"),
            ("unsigned int", "uint32_t"),
            ("long long", "int64_t"),
            ("unsigned long long", "uint64_t"),
        ],
    };
    if half {
        s.push_str(match dialect {
            Dialect::OpenCl => "#pragma OPENCL EXTENSION cl_khr_fp16 : enable\n",
            Dialect::Cuda => "#include <cuda_fp16.h>\n",
        });
    }
    for (base, name) in ints {
        s.push_str(&format!("typedef {base} {name};\n"));
    }
    s.push_str("typedef uint32_t uint_tp;\n");
    s
}

/// Alias definitions for Dtype, MItype, MOtype, Difftype and Acctype, plus
/// Multtype when the input type is an integer type.
pub fn define_types_header(compute: DataType, input: DataType, output: DataType, prefer_wide: bool) -> String {
    let t = KernelTypes { compute, input, output, prefer_wide };
    let mut s = String::new();
    if input.is_quantized() {
        let mult = if prefer_wide { "int64_t" } else { "int32_t" };
        s.push_str(&format!("typedef {mult} Multtype;\n"));
    }
    for (ty, name) in [
        (ArgType::Dtype, "Dtype"),
        (ArgType::MItype, "MItype"),
        (ArgType::MOtype, "MOtype"),
        (ArgType::Difftype, "Difftype"),
        (ArgType::Acctype, "Acctype"),
    ] {
        s.push_str(&format!("typedef {} {name};\n", t.c_type(ty)));
    }
    s
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn validate_args(args: &[KernelArg]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for a in args {
        if !is_identifier(&a.name) {
            return Err(Error::InvalidKernelArg(format!("'{}' is not an identifier", a.name)));
        }
        if !seen.insert(a.name.as_str()) {
            return Err(Error::InvalidKernelArg(format!("duplicate argument '{}'", a.name)));
        }
        if a.flags.contains(ArgFlags::GLOBAL_MEM | ArgFlags::LOCAL_MEM) {
            return Err(Error::InvalidKernelArg(format!("'{}' is both global and local memory", a.name)));
        }
    }
    Ok(())
}

fn render_arg(a: &KernelArg, types: &KernelTypes, dialect: Dialect) -> String {
    let mut ty = types.c_type(a.ty);
    let mut s = String::new();
    if a.is_pointer() {
        if dialect == Dialect::OpenCl {
            s.push_str(if a.flags.contains(ArgFlags::LOCAL_MEM) { "__local " } else { "__global " });
        }
        if a.flags.contains(ArgFlags::CONST) {
            s.push_str("const ");
        }
        s.push_str(&format!("{ty}* {}", a.name));
    } else {
        // OpenCL has no half-precision value arguments; they travel as float
        if dialect == Dialect::OpenCl && ty == "half" {
            ty = "float";
        }
        if a.flags.contains(ArgFlags::CONST) {
            s.push_str("const ");
        }
        s.push_str(&format!("{ty} {}", a.name));
    }
    s
}

/// Function header up to and including the opening brace.
pub fn emit_function_signature(name: &str, args: &[KernelArg], dialect: Dialect, types: &KernelTypes) -> Result<String> {
    if !is_identifier(name) {
        return Err(Error::InvalidKernelArg(format!("kernel name '{name}'")));
    }
    validate_args(args)?;
    let list = args.iter().map(|a| render_arg(a, types, dialect)).collect::<Vec<_>>().join(", ");
    Ok(match dialect {
        Dialect::OpenCl => format!("__kernel\nvoid {name}({list}) {{\n"),
        Dialect::Cuda => format!("extern \"C\" __global__ void \n{name}({list}) {{\n"),
    })
}

/// Grid-stride loop header over `[0, count)`.
pub fn emit_kernel_loop(index_type: &str, index: &str, count: &str, dialect: Dialect) -> String {
    let (start, step) = match dialect {
        Dialect::OpenCl => ("get_global_id(0)".to_string(), "get_global_size(0)".to_string()),
        Dialect::Cuda => (
            "blockIdx.x * blockDim.x + threadIdx.x".to_string(),
            "blockDim.x * gridDim.x".to_string(),
        ),
    };
    format!("\tfor ({index_type} {index} = {start}; {index} < ({count}); {index} += {step}) {{\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelProgram {
    pub name: String,
    pub dialect: Dialect,
    pub source: String,
    pub args: Vec<KernelArg>,
    pub content_hash: [u8; 32],
}

impl KernelProgram {
    pub fn hash_hex(&self) -> String {
        hex::encode(self.content_hash)
    }
}

pub fn content_hash(dialect: Dialect, source: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([dialect.tag()]);
    h.update(source.as_bytes());
    h.finalize().into()
}

/// Accumulates one program's source. Kernel names must be unique within
/// the builder, which is the compilation scope.
#[derive(Debug)]
pub struct ProgramBuilder {
    dialect: Dialect,
    types: KernelTypes,
    source: String,
    names: BTreeSet<String>,
    first: Option<(String, Vec<KernelArg>)>,
}

impl ProgramBuilder {
    pub fn new(dialect: Dialect, types: KernelTypes) -> Self {
        let half = [types.compute, types.input, types.output].contains(&DataType::Fp16);
        let mut source = setup_preamble(dialect, half);
        source.push_str(&define_types_header(types.compute, types.input, types.output, types.prefer_wide));
        ProgramBuilder { dialect, types, source, names: BTreeSet::new(), first: None }
    }

    pub fn function(&mut self, name: &str, args: Vec<KernelArg>) -> Result<()> {
        if self.names.contains(name) {
            return Err(Error::DuplicateKernel(name.to_string()));
        }
        let sig = emit_function_signature(name, &args, self.dialect, &self.types)?;
        self.names.insert(name.to_string());
        self.source.push_str(&sig);
        if self.first.is_none() {
            self.first = Some((name.to_string(), args));
        }
        Ok(())
    }

    pub fn kernel_loop(&mut self, index_type: &str, index: &str, count: &str) {
        self.source.push_str(&emit_kernel_loop(index_type, index, count, self.dialect));
    }

    /// Appends one body line at loop depth `indent`.
    pub fn line(&mut self, indent: usize, text: &str) {
        for _ in 0..indent {
            self.source.push('\t');
        }
        self.source.push_str(text);
        self.source.push('\n');
    }

    pub fn finish(self) -> Result<KernelProgram> {
        let (name, args) = self.first.ok_or_else(|| Error::InvalidKernelArg("program defines no kernel".into()))?;
        Ok(KernelProgram {
            content_hash: content_hash(self.dialect, &self.source),
            name,
            dialect: self.dialect,
            source: self.source,
            args,
        })
    }
}

pub fn relu_args(dtype: DataType) -> Vec<KernelArg> {
    let c = ArgFlags::CONST;
    let mut args = vec![
        KernelArg::new("n", ArgType::UintTp, c),
        KernelArg::new("in", ArgType::Dtype, c | ArgFlags::GLOBAL_MEM),
        KernelArg::new("out", ArgType::Dtype, ArgFlags::GLOBAL_MEM),
    ];
    if dtype.is_float() {
        args.push(KernelArg::new("negative_slope", ArgType::Dtype, c));
    } else {
        for (name, ty) in [
            ("shift_bits", ArgType::Int8),
            ("in_zero", ArgType::Difftype),
            ("mult", ArgType::Acctype),
            ("shift", ArgType::Int8),
            ("out_zero", ArgType::Acctype),
            ("out_min", ArgType::Acctype),
            ("out_max", ArgType::Acctype),
        ] {
            args.push(KernelArg::new(name, ty, c));
        }
    }
    args
}

/// Complete ReLU forward program for `dtype` in `dialect`.
pub fn emit_relu_program(dtype: DataType, dialect: Dialect) -> Result<KernelProgram> {
    let mut b = ProgramBuilder::new(dialect, KernelTypes::uniform(dtype));
    b.function("ReLUForward", relu_args(dtype))?;
    b.kernel_loop("uint_tp", "index", "n");
    if dtype.is_float() {
        b.line(2, "out[index] = in[index] > (Dtype)0 ? in[index] : in[index] * negative_slope;");
    } else {
        b.line(2, "Difftype relu = max((Difftype)((Difftype)(in[index]) - in_zero), (Difftype)0);");
        b.line(2, "Acctype reg = (Acctype)(((Multtype)(relu) * (Multtype)(mult)) / ((Multtype)1 << shift_bits));");
        b.line(2, "if (shift >= 0) {");
        b.line(3, "reg = reg >> shift;");
        b.line(2, "} else {");
        b.line(3, "reg = reg << -shift;");
        b.line(2, "}");
        b.line(2, "out[index] = (Dtype)(min(max(reg + out_zero, out_min), out_max));");
    }
    b.line(1, "}");
    b.line(0, "}");
    b.finish()
}

/// Emits `op` for `dtype`. Only `relu` is supported.
pub fn emit_program(op: &str, dtype: DataType, dialect: Dialect) -> Result<KernelProgram> {
    match op.to_ascii_lowercase().as_str() {
        "relu" => emit_relu_program(dtype, dialect),
        _ => Err(Error::Unsupported(format!("kernel for op '{op}'"))),
    }
}

/// Collapses every whitespace run to a single space.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
