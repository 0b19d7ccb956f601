//! Text formats: the columnar dataset layout and key-value generator configs.
//!
//! A dataset file is CSV-like with one observation per row. The header names
//! the role column, the m instrument columns and the value columns; the side
//! a row does not carry is left empty:
//!
//! ```text
//! # unpaired-iv dataset kind=one_hot m=2 d=1
//! role,i1,i2,y,x1
//! y,1,0,2.5,
//! x,0,1,,1.25
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::datagen::{BetaRule, GeneratorSpec, Setting};
use crate::dataset::{InstrumentKind, Instruments, UnpairedDataset};
use crate::error::{Error, Result};

pub fn write_dataset(path: &Path, ds: &UnpairedDataset) -> Result<()> {
    std::fs::write(path, dataset_to_string(ds))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<UnpairedDataset> {
    dataset_from_string(&std::fs::read_to_string(path)?)
}

pub fn dataset_to_string(ds: &UnpairedDataset) -> String {
    let kind = match ds.kind() {
        InstrumentKind::OneHot => "one_hot",
        InstrumentKind::Continuous => "continuous",
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# unpaired-iv dataset kind={kind} m={} d={}",
        ds.m, ds.d
    );
    let mut header = String::from("role");
    for i in 1..=ds.m {
        let _ = write!(header, ",i{i}");
    }
    header.push_str(",y");
    for j in 1..=ds.d {
        let _ = write!(header, ",x{j}");
    }
    out.push_str(&header);
    out.push('\n');

    for i in 0..ds.n() {
        out.push('y');
        push_instrument(&mut out, &ds.y_inst, i, ds.m);
        let _ = write!(out, ",{}", fmt_f64(ds.y[i]));
        for _ in 0..ds.d {
            out.push(',');
        }
        out.push('\n');
    }
    for j in 0..ds.n_tilde() {
        out.push('x');
        push_instrument(&mut out, &ds.x_inst, j, ds.m);
        out.push(','); // empty y cell
        for c in 0..ds.d {
            let _ = write!(out, ",{}", fmt_f64(ds.x[(j, c)]));
        }
        out.push('\n');
    }
    out
}

fn push_instrument(out: &mut String, inst: &Instruments, row: usize, m: usize) {
    match inst {
        Instruments::OneHot { env } => {
            for e in 0..m {
                out.push_str(if env[row] == e { ",1" } else { ",0" });
            }
        }
        Instruments::Continuous { rows } => {
            for e in 0..m {
                let _ = write!(out, ",{}", fmt_f64(rows[(row, e)]));
            }
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // Round-trippable without being noisy for integral values.
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:.17e}")
    }
}

pub fn dataset_from_string(text: &str) -> Result<UnpairedDataset> {
    let mut kind: Option<InstrumentKind> = None;
    let mut m: Option<usize> = None;
    let mut d: Option<usize> = None;
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.peek() {
        let line = line.trim();
        if line.starts_with('#') {
            for token in line.trim_start_matches('#').split_whitespace() {
                if let Some(v) = token.strip_prefix("kind=") {
                    kind = Some(parse_kind(v)?);
                } else if let Some(v) = token.strip_prefix("m=") {
                    m = Some(v.parse().map_err(|_| Error::Parse(format!("bad m: {v}")))?);
                } else if let Some(v) = token.strip_prefix("d=") {
                    d = Some(v.parse().map_err(|_| Error::Parse(format!("bad d: {v}")))?);
                }
            }
            lines.next();
        } else if line.is_empty() {
            lines.next();
        } else {
            break;
        }
    }
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("dataset file has no header".into()))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let m = match m {
        Some(m) => m,
        None => cols.iter().filter(|c| c.starts_with('i')).count(),
    };
    let d = match d {
        Some(d) => d,
        None => cols.iter().filter(|c| c.starts_with('x')).count(),
    };
    if cols.len() != 2 + m + d {
        return Err(Error::Parse(format!(
            "header has {} columns, expected {}",
            cols.len(),
            2 + m + d
        )));
    }

    let mut y_env: Vec<usize> = Vec::new();
    let mut y_rows: Vec<f64> = Vec::new();
    let mut y_vals: Vec<f64> = Vec::new();
    let mut x_env: Vec<usize> = Vec::new();
    let mut x_rows: Vec<f64> = Vec::new();
    let mut x_vals: Vec<f64> = Vec::new();
    let mut inferred_onehot = true;

    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + m + d {
            return Err(Error::Parse(format!(
                "row {} has {} fields, expected {}",
                lineno + 3,
                fields.len(),
                2 + m + d
            )));
        }
        let inst: Vec<f64> = fields[1..1 + m]
            .iter()
            .map(|f| parse_float(f))
            .collect::<Result<_>>()?;
        let onehot_env = as_one_hot(&inst);
        if onehot_env.is_none() {
            inferred_onehot = false;
        }
        match fields[0] {
            "y" => {
                y_vals.push(parse_float(fields[1 + m])?);
                y_env.push(onehot_env.unwrap_or(0));
                y_rows.extend_from_slice(&inst);
            }
            "x" => {
                for f in &fields[2 + m..] {
                    x_vals.push(parse_float(f)?);
                }
                x_env.push(onehot_env.unwrap_or(0));
                x_rows.extend_from_slice(&inst);
            }
            other => return Err(Error::Parse(format!("unknown role {other:?}"))),
        }
    }
    let kind = kind.unwrap_or(if inferred_onehot {
        InstrumentKind::OneHot
    } else {
        InstrumentKind::Continuous
    });
    if kind == InstrumentKind::OneHot && !inferred_onehot {
        return Err(Error::Parse(
            "file declares one-hot instruments but carries non-basis rows".into(),
        ));
    }
    let n = y_vals.len();
    let n_tilde = x_env.len();
    let (y_inst, x_inst) = match kind {
        InstrumentKind::OneHot => (
            Instruments::OneHot { env: y_env },
            Instruments::OneHot { env: x_env },
        ),
        InstrumentKind::Continuous => (
            Instruments::Continuous {
                rows: DMatrix::from_row_slice(n, m, &y_rows),
            },
            Instruments::Continuous {
                rows: DMatrix::from_row_slice(n_tilde, m, &x_rows),
            },
        ),
    };
    UnpairedDataset::new(
        m,
        d,
        y_inst,
        DVector::from_vec(y_vals),
        x_inst,
        DMatrix::from_row_slice(n_tilde, d, &x_vals),
    )
}

fn as_one_hot(inst: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in inst.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return None;
            }
            hot = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
}

fn parse_float(s: &str) -> Result<f64> {
    let s = s.trim();
    if s.is_empty() {
        return Err(Error::Parse("missing numeric field".into()));
    }
    s.parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad float: {s:?}")))
}

fn parse_kind(s: &str) -> Result<InstrumentKind> {
    match s.to_ascii_lowercase().as_str() {
        "one_hot" | "onehot" | "categorical" => Ok(InstrumentKind::OneHot),
        "continuous" => Ok(InstrumentKind::Continuous),
        other => Err(Error::Parse(format!("unknown instrument kind {other:?}"))),
    }
}

/// Parse `key = value` lines into (key, value) pairs, ignoring blanks and
/// `#` comments. Keys are lowercased.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            ))
        })?;
        out.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn generator_spec_to_string(spec: &GeneratorSpec) -> String {
    let kind = match spec.kind {
        InstrumentKind::OneHot => "categorical",
        InstrumentKind::Continuous => "continuous",
    };
    let setting = match spec.setting {
        Setting::S1 => "s1",
        Setting::S2 => "s2",
        Setting::S3 => "s3",
    };
    let beta = match &spec.beta {
        BetaRule::SparseUniform => "sparse_uniform".to_string(),
        BetaRule::DenseUniform => "dense_uniform".to_string(),
        BetaRule::Explicit(v) => v
            .iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(", "),
    };
    format!(
        "kind = {kind}\nsetting = {setting}\nm = {}\nd = {}\ns_star = {}\nk_rank = {}\n\
         r = {}\nr_tilde = {}\nbeta = {beta}\ngamma_x = {}\ngamma_y = {}\nsigma_u = {}\n\
         sigma_x = {}\nsigma_eps = {}\npi_scale = {}\nseed = {}\n",
        spec.m,
        spec.d,
        spec.s_star,
        spec.k_rank,
        spec.r,
        spec.r_tilde,
        spec.gamma_x,
        spec.gamma_y,
        spec.sigma_u,
        spec.sigma_x,
        spec.sigma_eps,
        spec.pi_scale,
        spec.seed
    )
}

pub fn generator_spec_from_string(text: &str) -> Result<GeneratorSpec> {
    let pairs = parse_key_values(text)?;
    let mut kind = InstrumentKind::OneHot;
    let mut setting = Setting::S1;
    for (k, v) in &pairs {
        match k.as_str() {
            "kind" => kind = parse_kind(v)?,
            "setting" => {
                setting = match v.to_ascii_lowercase().as_str() {
                    "s1" | "setting1" | "1" => Setting::S1,
                    "s2" | "setting2" | "2" => Setting::S2,
                    "s3" | "setting3" | "3" => Setting::S3,
                    other => return Err(Error::Parse(format!("unknown setting {other:?}"))),
                }
            }
            _ => {}
        }
    }
    let mut spec = match setting {
        Setting::S1 => GeneratorSpec::setting1(kind),
        Setting::S2 => GeneratorSpec::setting2(kind),
        Setting::S3 => GeneratorSpec::setting3(kind),
    };
    for (k, v) in &pairs {
        match k.as_str() {
            "kind" | "setting" => {}
            "m" => spec.m = parse_usize(k, v)?,
            "d" => spec.d = parse_usize(k, v)?,
            "s_star" => spec.s_star = parse_usize(k, v)?,
            "k_rank" | "k" => spec.k_rank = parse_usize(k, v)?,
            "r" => spec.r = parse_usize(k, v)?,
            "r_tilde" => spec.r_tilde = parse_usize(k, v)?,
            "beta" => {
                spec.beta = match v.to_ascii_lowercase().as_str() {
                    "sparse_uniform" => BetaRule::SparseUniform,
                    "dense_uniform" => BetaRule::DenseUniform,
                    _ => BetaRule::Explicit(
                        v.split(',')
                            .map(|t| parse_float(t))
                            .collect::<Result<Vec<f64>>>()?,
                    ),
                }
            }
            "gamma_x" => spec.gamma_x = parse_float(v)?,
            "gamma_y" => spec.gamma_y = parse_float(v)?,
            "sigma_u" => spec.sigma_u = parse_float(v)?,
            "sigma_x" => spec.sigma_x = parse_float(v)?,
            "sigma_eps" => spec.sigma_eps = parse_float(v)?,
            "pi_scale" => spec.pi_scale = parse_float(v)?,
            "seed" => {
                spec.seed = v
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad seed {v:?}")))?
            }
            other => return Err(Error::Parse(format!("unknown generator key {other:?}"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::Parse(format!("key {key}: expected integer, got {v:?}")))
}

/// Read a whitespace/comma separated numeric matrix, one row per line.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    matrix_from_string(&std::fs::read_to_string(path)?)
}

pub fn matrix_from_string(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(parse_float)
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse("ragged matrix rows".into()));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("empty matrix".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_row_slice(r, c, &rows.concat()))
}
