//! Multi-style vocabulary bias on plain vectors.

use ndarray::Array1;

use crate::error::{CcrsError, Result};
use crate::params::ParamStore;
use crate::tensor::{gelu, softmax, Matrix};

pub const STYLE_L: &str = "dial.style.l";
pub const STYLE_WC: &str = "dial.style.wc";
pub const STYLE_F1: &str = "dial.style.f1";
pub const STYLE_F1_B: &str = "dial.style.f1_b";
pub const STYLE_F2: &str = "dial.style.f2";
pub const STYLE_F2_B: &str = "dial.style.f2_b";

/// Latent style embeddings `L` (`d × n_s`), similarity `W_C` (`d × d`) and
/// the two-layer bias mapper `d → d_h → |V|`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBank {
    pub l: Matrix,
    pub wc: Matrix,
    pub f1: Matrix,
    pub f1_b: Array1<f64>,
    pub f2: Matrix,
    pub f2_b: Array1<f64>,
}

impl StyleBank {
    pub fn from_params(p: &ParamStore) -> Result<Self> {
        Ok(Self {
            l: p.get(STYLE_L)?.clone(),
            wc: p.get(STYLE_WC)?.clone(),
            f1: p.get(STYLE_F1)?.clone(),
            f1_b: p.get(STYLE_F1_B)?.row(0).to_owned(),
            f2: p.get(STYLE_F2)?.clone(),
            f2_b: p.get(STYLE_F2_B)?.row(0).to_owned(),
        })
    }

    pub fn n_styles(&self) -> usize {
        self.l.ncols()
    }

    /// `ℱ(g)`.
    pub fn map_bias(&self, g: &Array1<f64>) -> Array1<f64> {
        let hidden = (self.f1.dot(g) + &self.f1_b).mapv(gelu);
        self.f2.dot(&hidden) + &self.f2_b
    }
}

/// `μ^m = softmax(p_u W_C L)`, or the raw scores when `normalize` is off.
pub fn style_weights(p_u: &Array1<f64>, bank: &StyleBank, normalize: bool) -> Result<Vec<f64>> {
    if p_u.len() != bank.wc.nrows() {
        return Err(CcrsError::Dimension(format!("p_u has {} entries, style bank expects {}", p_u.len(), bank.wc.nrows())));
    }
    let scores = p_u.dot(&bank.wc).dot(&bank.l).to_vec();
    Ok(if normalize { softmax(&scores) } else { scores })
}

/// `ℱ(μ^m Lᵀ)`.
pub fn style_bias(mu: &[f64], bank: &StyleBank) -> Result<Array1<f64>> {
    Ok(bank.map_bias(&style_vector(mu, bank)?))
}

/// `g_u = μ^m Lᵀ`.
pub fn style_vector(mu: &[f64], bank: &StyleBank) -> Result<Array1<f64>> {
    if mu.len() != bank.n_styles() {
        return Err(CcrsError::Dimension(format!("{} style weights for {} styles", mu.len(), bank.n_styles())));
    }
    Ok(bank.l.dot(&Array1::from(mu.to_vec())))
}

/// `softmax(W_G q + bias + b)`.
pub fn vocab_distribution(q: &Array1<f64>, bias: &Array1<f64>, w_g: &Matrix, b: &Array1<f64>) -> Result<Vec<f64>> {
    if q.len() != w_g.ncols() || bias.len() != w_g.nrows() || b.len() != w_g.nrows() {
        return Err(CcrsError::Dimension("generator head dimensions disagree".into()));
    }
    Ok(softmax(&(w_g.dot(q) + bias + b).to_vec()))
}
