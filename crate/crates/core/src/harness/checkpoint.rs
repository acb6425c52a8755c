//! Versioned text checkpoints of [`UnifiedParams`]. Every float is written
//! as the hexadecimal bit pattern of its IEEE-754 double, so a load/save
//! cycle reproduces the file byte for byte. The header carries a SHA-256 of
//! the body.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffqp::SoftConfig;
use crate::lifting::{Activation, Layer, LiftingNet};
use crate::unified::UnifiedParams;

use super::artifacts::write_atomic;

pub const VERSION: u32 = 1;
const MAGIC: &str = "unirl-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found}, expected {VERSION}")]
    VersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptFile(msg.into())
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn write_mat(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = write!(out, "mat {name} {} {}", m.nrows(), m.ncols());
    for v in m.iter() {
        let _ = write!(out, " {}", hex(*v));
    }
    out.push('\n');
}

fn write_vec(out: &mut String, name: &str, v: &DVector<f64>) {
    let _ = write!(out, "vec {name} {}", v.len());
    for x in v.iter() {
        let _ = write!(out, " {}", hex(*x));
    }
    out.push('\n');
}

fn body(theta: &UnifiedParams) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sigma_min {}", hex(theta.sigma_min));
    let _ = writeln!(
        s,
        "soft {} {} {}",
        hex(theta.soft.rho_lin),
        hex(theta.soft.rho_quad),
        u8::from(theta.soft.soften_equalities)
    );
    write_mat(&mut s, "m_factor", &theta.m_factor);
    write_vec(&mut s, "q_vec", &theta.q_vec);
    write_mat(&mut s, "a_eq", &theta.a_eq);
    write_mat(&mut s, "b_eq", &theta.b_eq);
    write_vec(&mut s, "rhs_eq", &theta.rhs_eq);
    write_mat(&mut s, "c_in", &theta.c_in);
    write_mat(&mut s, "d_in", &theta.d_in);
    write_vec(&mut s, "rhs_in", &theta.rhs_in);
    write_mat(&mut s, "k", &theta.k);
    write_mat(&mut s, "noise_raw", &theta.noise_raw);
    let _ = writeln!(s, "layers {}", theta.lifting.layers.len());
    for l in &theta.lifting.layers {
        let act = match l.act {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        };
        let _ = writeln!(s, "layer {act}");
        write_mat(&mut s, "w", &l.w);
        write_vec(&mut s, "b", &l.b);
    }
    s.push_str("end\n");
    s
}

fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
}

pub fn to_string(theta: &UnifiedParams) -> String {
    let b = body(theta);
    format!("{MAGIC} {VERSION}\nchecksum {}\n{b}", digest(&b))
}

struct Lines<'a> {
    it: std::str::Lines<'a>,
}

impl<'a> Lines<'a> {
    fn next_tokens(&mut self, tag: &str) -> Result<Vec<&'a str>, CheckpointError> {
        let line = self.it.next().ok_or_else(|| corrupt(format!("missing `{tag}`")))?;
        let mut toks: Vec<&str> = line.split(' ').collect();
        if toks.first() != Some(&tag) {
            return Err(corrupt(format!("expected `{tag}`, found `{line}`")));
        }
        toks.remove(0);
        Ok(toks)
    }

    fn float(tok: &str) -> Result<f64, CheckpointError> {
        if tok.len() != 16 {
            return Err(corrupt(format!("bad float `{tok}`")));
        }
        u64::from_str_radix(tok, 16)
            .map(f64::from_bits)
            .map_err(|_| corrupt(format!("bad float `{tok}`")))
    }

    fn count(tok: Option<&&str>) -> Result<usize, CheckpointError> {
        tok.and_then(|t| t.parse().ok()).ok_or_else(|| corrupt("bad size"))
    }

    fn mat(&mut self, name: &str) -> Result<DMatrix<f64>, CheckpointError> {
        let toks = self.next_tokens("mat")?;
        if toks.first() != Some(&name) {
            return Err(corrupt(format!("expected matrix `{name}`")));
        }
        let (r, c) = (Self::count(toks.get(1))?, Self::count(toks.get(2))?);
        let vals = &toks[3..];
        if vals.len() != r * c {
            return Err(corrupt(format!("matrix `{name}` has {} entries, expected {}", vals.len(), r * c)));
        }
        let data = vals.iter().map(|t| Self::float(t)).collect::<Result<Vec<_>, _>>()?;
        Ok(DMatrix::from_vec(r, c, data))
    }

    fn vec(&mut self, name: &str) -> Result<DVector<f64>, CheckpointError> {
        let toks = self.next_tokens("vec")?;
        if toks.first() != Some(&name) {
            return Err(corrupt(format!("expected vector `{name}`")));
        }
        let n = Self::count(toks.get(1))?;
        let vals = &toks[2..];
        if vals.len() != n {
            return Err(corrupt(format!("vector `{name}` has {} entries, expected {n}", vals.len())));
        }
        let data = vals.iter().map(|t| Self::float(t)).collect::<Result<Vec<_>, _>>()?;
        Ok(DVector::from_vec(data))
    }
}

pub fn from_str(text: &str) -> Result<UnifiedParams, CheckpointError> {
    let (header, rest) = text.split_once('\n').ok_or_else(|| corrupt("missing header"))?;
    let version = header
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| corrupt("not a checkpoint"))?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let (sum_line, body) = rest.split_once('\n').ok_or_else(|| corrupt("missing checksum"))?;
    let expected = sum_line.strip_prefix("checksum ").ok_or_else(|| corrupt("missing checksum"))?;
    if digest(body) != expected {
        return Err(corrupt("checksum mismatch"));
    }

    let mut lines = Lines { it: body.lines() };
    let sigma_min = Lines::float(lines.next_tokens("sigma_min")?.first().ok_or_else(|| corrupt("sigma_min"))?)?;
    let soft = lines.next_tokens("soft")?;
    if soft.len() != 3 {
        return Err(corrupt("soft"));
    }
    let soft = SoftConfig {
        rho_lin: Lines::float(soft[0])?,
        rho_quad: Lines::float(soft[1])?,
        soften_equalities: soft[2] == "1",
    };
    let m_factor = lines.mat("m_factor")?;
    let q_vec = lines.vec("q_vec")?;
    let a_eq = lines.mat("a_eq")?;
    let b_eq = lines.mat("b_eq")?;
    let rhs_eq = lines.vec("rhs_eq")?;
    let c_in = lines.mat("c_in")?;
    let d_in = lines.mat("d_in")?;
    let rhs_in = lines.vec("rhs_in")?;
    let k = lines.mat("k")?;
    let noise_raw = lines.mat("noise_raw")?;
    let n_layers = Lines::count(lines.next_tokens("layers")?.first())?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let act = match lines.next_tokens("layer")?.first() {
            Some(&"tanh") => Activation::Tanh,
            Some(&"identity") => Activation::Identity,
            _ => return Err(corrupt("bad activation")),
        };
        let w = lines.mat("w")?;
        let b = lines.vec("b")?;
        layers.push(Layer { w, b, act });
    }
    lines.next_tokens("end")?;

    let theta = UnifiedParams {
        m_factor,
        q_vec,
        a_eq,
        b_eq,
        rhs_eq,
        c_in,
        d_in,
        rhs_in,
        lifting: LiftingNet { layers },
        k,
        noise_raw,
        sigma_min,
        soft,
    };
    let n = theta.n_mu();
    let shapes_ok = theta.m_factor.nrows() == n
        && theta.q_vec.len() == n
        && theta.b_eq.ncols() == n
        && theta.d_in.ncols() == n
        && theta.k.ncols() == n
        && theta.a_eq.nrows() == theta.b_eq.nrows()
        && theta.rhs_eq.len() == theta.b_eq.nrows()
        && theta.c_in.nrows() == theta.d_in.nrows()
        && theta.rhs_in.len() == theta.d_in.nrows()
        && theta.noise_raw.nrows() == theta.k.nrows()
        && theta.noise_raw.ncols() == theta.k.nrows()
        && !theta.lifting.layers.is_empty()
        && theta.a_eq.ncols() == theta.lifting.n_z()
        && theta.c_in.ncols() == theta.lifting.n_z();
    if !shapes_ok {
        return Err(corrupt("inconsistent shapes"));
    }
    Ok(theta)
}

pub fn save(theta: &UnifiedParams, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, to_string(theta).as_bytes())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<UnifiedParams, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => corrupt("not UTF-8"),
        _ => CheckpointError::Io(e),
    })?;
    from_str(&text)
}
