//! Pseudo-SVD low-rank adapter: `W0 x + (alpha / r) * P diag(lambda) Q x`.
//!
//! `lambda` is never stored directly. Each adapter keeps a raw vector `v`
//! and a [`SingularMode`] that maps it to the pseudo singular values, so the
//! optimizers always work on unconstrained reals.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::linalg::{self, gaussian_matrix, LinalgError, Matrix, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid adapter dimensions: {0}")]
    InvalidDims(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("adapter parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

/// How the raw vector `v` becomes pseudo singular values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SingularMode {
    /// `lambda = v`.
    RealValue,
    /// `lambda = softmax(v)`: positive, sums to one.
    Softmax,
    /// `lambda = sigmoid(v)`: strictly inside `(0, 1)`.
    ApproxBinary,
}

impl SingularMode {
    pub const ALL: [SingularMode; 3] = [Self::RealValue, Self::Softmax, Self::ApproxBinary];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::RealValue => "real_value",
            Self::Softmax => "softmax",
            Self::ApproxBinary => "approx_binary",
        }
    }
}

impl FromStr for SingularMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "real_value" | "real" => Ok(Self::RealValue),
            "softmax" => Ok(Self::Softmax),
            "approx_binary" | "binary" => Ok(Self::ApproxBinary),
            other => Err(format!(
                "unknown singular mode `{other}` (expected real_value, softmax or approx_binary)"
            )),
        }
    }
}

pub fn materialize_lambda(v: &[f64], mode: SingularMode) -> Vec<f64> {
    match mode {
        SingularMode::RealValue => v.to_vec(),
        SingularMode::Softmax => linalg::softmax_vector(v),
        SingularMode::ApproxBinary => linalg::sigmoid_vector(v),
    }
}

/// `J^T upstream` where `J = d lambda / d v`.
pub fn lambda_jacobian_vp(v: &[f64], mode: SingularMode, upstream: &[f64]) -> Result<Vec<f64>> {
    if v.len() != upstream.len() {
        return Err(AdapterError::LengthMismatch {
            expected: v.len(),
            got: upstream.len(),
        });
    }
    Ok(match mode {
        SingularMode::RealValue => upstream.to_vec(),
        SingularMode::Softmax => {
            // J is symmetric: diag(l) - l l^T, so J^T u = l * (u - <l, u>).
            let lambda = linalg::softmax_vector(v);
            let mean = linalg::dot(&lambda, upstream);
            lambda.iter().zip(upstream).map(|(l, u)| l * (u - mean)).collect()
        }
        SingularMode::ApproxBinary => v
            .iter()
            .zip(upstream)
            .map(|(x, u)| {
                let s = linalg::sigmoid(*x);
                s * (1.0 - s) * u
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum W0Init {
    Zero,
    Gaussian(f64),
}

/// One adapted linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    w0: Matrix,
    p: Matrix,
    q: Matrix,
    v: Vec<f64>,
    mode: SingularMode,
    alpha: f64,
    layer_index: usize,
}

/// Gradients for the trainable blocks of one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub dp: Matrix,
    pub dq: Matrix,
    pub dv: Vec<f64>,
}

impl AdapterGrads {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        Self {
            dp: Matrix::zeros(adapter.p.rows(), adapter.p.cols()),
            dq: Matrix::zeros(adapter.q.rows(), adapter.q.cols()),
            dv: vec![0.0; adapter.v.len()],
        }
    }
}

/// Intermediate values kept from the forward pass for `backward`.
struct ForwardCache {
    lambda: Vec<f64>,
    qx: Matrix,
    scaled: Matrix,
}

impl LoraAdapter {
    pub fn new(
        w0: Matrix,
        p: Matrix,
        q: Matrix,
        v: Vec<f64>,
        mode: SingularMode,
        alpha: f64,
    ) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        let r = v.len();
        if r == 0 {
            return Err(AdapterError::InvalidDims("rank must be at least 1".into()));
        }
        if r > d_out.min(d_in) {
            return Err(AdapterError::InvalidDims(format!(
                "rank {r} exceeds min({d_out}, {d_in})"
            )));
        }
        if p.shape() != (d_out, r) || q.shape() != (r, d_in) {
            return Err(AdapterError::InvalidDims(format!(
                "P {:?} and Q {:?} do not fit W0 {:?} with rank {r}",
                p.shape(),
                q.shape(),
                w0.shape()
            )));
        }
        if !alpha.is_finite() || v.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite("LoraAdapter::new").into());
        }
        Ok(Self {
            w0,
            p,
            q,
            v,
            mode,
            alpha,
            layer_index: 0,
        })
    }

    pub fn with_layer_index(mut self, k: usize) -> Self {
        self.layer_index = k;
        self
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }
    pub fn p(&self) -> &Matrix {
        &self.p
    }
    pub fn q(&self) -> &Matrix {
        &self.q
    }
    pub fn v(&self) -> &[f64] {
        &self.v
    }
    pub fn mode(&self) -> SingularMode {
        self.mode
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn rank(&self) -> usize {
        self.v.len()
    }
    pub fn layer_index(&self) -> usize {
        self.layer_index
    }
    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }
    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    /// `alpha / r`, the factor applied to the low-rank increment.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn lambda(&self) -> Vec<f64> {
        materialize_lambda(&self.v, self.mode)
    }

    pub fn set_p(&mut self, values: &[f64]) -> Result<()> {
        Ok(self.p.assign(values)?)
    }

    pub fn set_q(&mut self, values: &[f64]) -> Result<()> {
        Ok(self.q.assign(values)?)
    }

    pub fn set_v(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.v.len() {
            return Err(AdapterError::LengthMismatch {
                expected: self.v.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite("set_v").into());
        }
        self.v.copy_from_slice(values);
        Ok(())
    }

    /// Dense `(alpha / r) P diag(lambda) Q`.
    pub fn delta_w(&self) -> Result<Matrix> {
        let scaled_p = self.p.scale_cols(&self.lambda())?;
        Ok(scaled_p.matmul(&self.q)?.scale(self.scaling())?)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.d_in() {
            return Err(LinalgError::DimensionMismatch {
                op: "adapter forward",
                left: self.w0.shape(),
                right: x.shape(),
            }
            .into());
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let lambda = self.lambda();
        let qx = self.q.matmul(x)?;
        let scaled = qx.scale_rows(&lambda)?;
        let increment = self.p.matmul(&scaled)?.scale(self.scaling())?;
        let out = self.w0.matmul(x)?.add(&increment)?;
        Ok((out, ForwardCache { lambda, qx, scaled }))
    }

    /// Applies the layer to the columns of `x` (`d_in x batch`).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_cached(x).map(|(out, _)| out)
    }

    /// Reverse pass for a loss whose gradient at the layer output is
    /// `upstream`. Returns the parameter gradients and the input gradient.
    /// `W0` is frozen and gets none.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<(AdapterGrads, Matrix)> {
        let (_, cache) = self.forward_cached(x)?;
        if upstream.shape() != (self.d_out(), x.cols()) {
            return Err(LinalgError::DimensionMismatch {
                op: "adapter backward",
                left: (self.d_out(), x.cols()),
                right: upstream.shape(),
            }
            .into());
        }
        let s = self.scaling();
        let dp = upstream.matmul(&cache.scaled.transpose())?.scale(s)?;
        let d_scaled = self.p.transpose().matmul(upstream)?.scale(s)?;
        let d_lambda = d_scaled.row_dots(&cache.qx)?;
        let d_qx = d_scaled.scale_rows(&cache.lambda)?;
        let dq = d_qx.matmul(&x.transpose())?;
        let dx = self
            .w0
            .transpose()
            .matmul(upstream)?
            .add(&self.q.transpose().matmul(&d_qx)?)?;
        let dv = lambda_jacobian_vp(&self.v, self.mode, &d_lambda)?;
        Ok((AdapterGrads { dp, dq, dv }, dx))
    }

    /// `||P^T P - I||_F + ||Q Q^T - I||_F`.
    pub fn orthogonality_defect(&self) -> f64 {
        self.p_defect() + self.q_defect()
    }

    pub fn p_defect(&self) -> f64 {
        let r = self.rank();
        let gram = self.p.transpose().matmul(&self.p).expect("P^T P shape");
        gram.sub(&Matrix::identity(r)).expect("r x r").frobenius()
    }

    pub fn q_defect(&self) -> f64 {
        let r = self.rank();
        let gram = self.q.matmul(&self.q.transpose()).expect("Q Q^T shape");
        gram.sub(&Matrix::identity(r)).expect("r x r").frobenius()
    }

    /// Text dump that round-trips every `f64` bit-exactly.
    ///
    /// Layout, one item per line:
    ///
    /// ```text
    /// bilora-adapter
    /// format_version 1
    /// mode <real_value|softmax|approx_binary>
    /// alpha <f64>
    /// rank <r>
    /// layer_index <k>
    /// w0 <rows> <cols> <row-major values...>
    /// p <rows> <cols> <values...>
    /// q <rows> <cols> <values...>
    /// v <r> <values...>
    /// ```
    ///
    /// Floats are written as `{:.16e}` (17 significant digits).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("bilora-adapter\n");
        out.push_str(&format!("format_version {ADAPTER_FORMAT_VERSION}\n"));
        out.push_str(&format!("mode {}\n", self.mode.as_str()));
        out.push_str(&format!("alpha {}\n", fmt_f64(self.alpha)));
        out.push_str(&format!("rank {}\n", self.rank()));
        out.push_str(&format!("layer_index {}\n", self.layer_index));
        for (name, m) in [("w0", &self.w0), ("p", &self.p), ("q", &self.q)] {
            let _ = write!(out, "{name} {} {}", m.rows(), m.cols());
            for x in m.data() {
                let _ = write!(out, " {}", fmt_f64(*x));
            }
            out.push('\n');
        }
        let _ = write!(out, "v {}", self.v.len());
        for x in &self.v {
            let _ = write!(out, " {}", fmt_f64(*x));
        }
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |m: String| AdapterError::Parse(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("bilora-adapter") {
            return Err(perr("missing `bilora-adapter` magic line".into()));
        }
        let mut field = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| perr(format!("missing `{key}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(perr(format!("expected `{key}`, found `{line}`")));
            }
            Ok(parts.map(str::to_owned).collect())
        };
        let version: u32 = parse_one(&field("format_version")?)?;
        if version != ADAPTER_FORMAT_VERSION {
            return Err(perr(format!("unsupported format_version {version}")));
        }
        let mode_str: String = parse_one(&field("mode")?)?;
        let mode = mode_str.parse::<SingularMode>().map_err(perr)?;
        let alpha: f64 = parse_one(&field("alpha")?)?;
        let rank: usize = parse_one(&field("rank")?)?;
        let layer_index: usize = parse_one(&field("layer_index")?)?;
        let w0 = parse_matrix(&field("w0")?)?;
        let p = parse_matrix(&field("p")?)?;
        let q = parse_matrix(&field("q")?)?;
        let v_fields = field("v")?;
        let n: usize = parse_one(&v_fields[..1.min(v_fields.len())])?;
        let v = v_fields[1..]
            .iter()
            .map(|s| parse_f64(s))
            .collect::<Result<Vec<_>>>()?;
        if n != rank || v.len() != rank {
            return Err(perr(format!("rank {rank} but v has {} values", v.len())));
        }
        Ok(Self::new(w0, p, q, v, mode, alpha)?.with_layer_index(layer_index))
    }
}

pub const ADAPTER_FORMAT_VERSION: u32 = 1;

/// Scientific notation with 17 significant digits; parses back bit-exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| AdapterError::Parse(format!("bad float `{s}`: {e}")))
}

fn parse_one<T: FromStr>(fields: &[String]) -> Result<T> {
    match fields {
        [one] => one
            .parse::<T>()
            .map_err(|_| AdapterError::Parse(format!("cannot parse `{one}`"))),
        _ => Err(AdapterError::Parse(format!("expected one value, got {fields:?}"))),
    }
}

fn parse_matrix(fields: &[String]) -> Result<Matrix> {
    if fields.len() < 2 {
        return Err(AdapterError::Parse("matrix line needs rows and cols".into()));
    }
    let rows: usize = parse_one(&fields[..1])?;
    let cols: usize = parse_one(&fields[1..2])?;
    let data = fields[2..].iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>>>()?;
    Ok(Matrix::new(rows, cols, data)?)
}

/// Random adapter. `P` and `Q` are drawn from `N(0, 1/r)`; `v` starts at zero,
/// which gives a zero increment in `RealValue` mode and uniform `lambda`
/// otherwise (`1/r` for softmax, `0.5` for sigmoid).
pub fn init_adapter(
    rng: &mut Rng,
    d_out: usize,
    d_in: usize,
    r: usize,
    alpha: f64,
    mode: SingularMode,
    w0_init: W0Init,
) -> Result<LoraAdapter> {
    if r == 0 || d_out == 0 || d_in == 0 {
        return Err(AdapterError::InvalidDims(format!(
            "d_out={d_out}, d_in={d_in}, r={r}; all must be >= 1"
        )));
    }
    if r > d_out.min(d_in) {
        return Err(AdapterError::InvalidDims(format!(
            "rank {r} exceeds min({d_out}, {d_in})"
        )));
    }
    let w0 = match w0_init {
        W0Init::Zero => Matrix::zeros(d_out, d_in),
        W0Init::Gaussian(std) => gaussian_matrix(rng, d_out, d_in, std)?,
    };
    let std = 1.0 / (r as f64).sqrt();
    let p = gaussian_matrix(rng, d_out, r, std)?;
    let q = gaussian_matrix(rng, r, d_in, std)?;
    LoraAdapter::new(w0, p, q, vec![0.0; r], mode, alpha)
}
