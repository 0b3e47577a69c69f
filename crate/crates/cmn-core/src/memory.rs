//! Class-specific prototype memory.
//!
//! The memory is a `C x D` matrix whose row `i` holds the prototype of class
//! `i`, maintained as an exponential moving average of that class's
//! features: `m_i <- (1 - beta) * m_i + beta * f`. Reading retrieves a
//! weighted combination of prototypes; with the default attention mode the
//! weights are a softmax over cosine similarities at temperature `tau`. The
//! retrieved response is added to the query feature downstream
//! ([`augment`]).
//!
//! A slot only participates in reads once it has received a write and has a
//! non-degenerate norm; weights are renormalized over those eligible slots.
//! Before any write the response is zero, so the module is an exact no-op.
//! Prototypes never receive gradients — the moving average is their only
//! update rule — but [`CategoricalMemory::read_backward`] propagates
//! gradients through the attention weights to the query (and to the
//! predictor parameters in [`ReadMode::Predicted`]).

use serde::{Deserialize, Serialize};

use crate::bytes::{put_f64, put_u16, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::numerics::{axpy, cosine, dot, matvec, norm, stable_softmax, Matrix, Rng, NORM_FLOOR};

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"CMNM";
pub const SNAPSHOT_VERSION: u16 = 1;

/// Default update rate and read temperature for memories created without an
/// explicit configuration.
pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_TAU: f64 = 0.1;

/// Similarity metric used to score a query against prototypes.
///
/// `Cosine` is the primary metric; `Dot` (raw inner product) is kept so the
/// two can be compared empirically via the experiment harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    Dot,
}

/// Trainable parameters of the predicted-selection read mode: a fully
/// connected layer whose softmaxed output replaces the similarity-based
/// attention scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    /// `C x D` layer weight.
    pub weight: Matrix,
    /// `C` bias.
    pub bias: Vec<f64>,
}

impl PredictorParams {
    /// Small random init (std 0.01, zero bias): the initial predicted
    /// weights start near uniform.
    pub fn new(num_classes: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut weight = Matrix::zeros(num_classes, dim);
        for v in weight.data_mut() {
            *v = rng.normal(0.0, 0.01);
        }
        PredictorParams {
            weight,
            bias: vec![0.0; num_classes],
        }
    }

    fn check_shape(&self, num_classes: usize, dim: usize) -> Result<()> {
        if self.weight.rows() != num_classes || self.weight.cols() != dim {
            return Err(Error::Shape {
                op: "predicted read",
                lhs_rows: self.weight.rows(),
                lhs_cols: self.weight.cols(),
                rhs_rows: num_classes,
                rhs_cols: dim,
            });
        }
        if self.bias.len() != num_classes {
            return Err(Error::Length {
                op: "predicted read bias",
                lhs: self.bias.len(),
                rhs: num_classes,
            });
        }
        Ok(())
    }
}

/// How attention weights are produced for a read.
#[derive(Clone, Copy, Debug)]
pub enum ReadMode<'a> {
    /// Softmax over similarity scores at temperature `tau` (the standard
    /// mechanism).
    Attention,
    /// Uniform `1/n` over the `n` eligible slots.
    Equal,
    /// Keep only the `k` largest attention weights (ties broken by lower
    /// class index) and renormalize them to sum 1.
    TopK(usize),
    /// Weights predicted by a learned linear layer plus softmax
    /// (temperature 1), restricted to eligible slots and renormalized.
    Predicted(&'a PredictorParams),
}

/// Attention weights and the retrieved response for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadResult {
    /// `C` weights; zero at read-ineligible slots. Sums to 1 over eligible
    /// slots when any are eligible, all-zero otherwise.
    pub weights: Vec<f64>,
    /// `D` response vector: the weighted sum of prototypes.
    pub response: Vec<f64>,
    pub eligible_count: usize,
}

/// Gradient of `<upstream, f + response(f)>` with respect to the query, and
/// with respect to the predictor parameters in predicted mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadBackward {
    pub grad_input: Vec<f64>,
    /// `(d weight, d bias)`, present only for [`ReadMode::Predicted`].
    pub predictor: Option<(Matrix, Vec<f64>)>,
}

/// The `C x D` prototype memory.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalMemory {
    slots: Matrix,
    initialized: Vec<bool>,
    beta: f64,
    tau: f64,
    frozen: bool,
}

impl CategoricalMemory {
    /// Empty memory: zero slots, nothing initialized, writable.
    pub fn new(num_classes: usize, dim: usize, beta: f64, tau: f64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "memory must have at least one class and one dimension, got {num_classes}x{dim}"
            )));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in the open interval (0, 1), got {beta}"
            )));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive and finite, got {tau}"
            )));
        }
        Ok(CategoricalMemory {
            slots: Matrix::zeros(num_classes, dim),
            initialized: vec![false; num_classes],
            beta,
            tau,
            frozen: false,
        })
    }

    /// Randomly initialized memory, frozen from the start: every slot is
    /// i.i.d. Gaussian(0, scale) and writes are rejected. Used by the
    /// fixed-random-module ablation.
    pub fn new_random(num_classes: usize, dim: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        Self::new_random_with(num_classes, dim, scale, DEFAULT_BETA, DEFAULT_TAU, rng)
    }

    /// [`Self::new_random`] with explicit `beta`/`tau`.
    pub fn new_random_with(
        num_classes: usize,
        dim: usize,
        scale: f64,
        beta: f64,
        tau: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "random memory scale must be positive and finite, got {scale}"
            )));
        }
        let mut mem = Self::new(num_classes, dim, beta, tau)?;
        for v in mem.slots.data_mut() {
            *v = rng.normal(0.0, scale);
        }
        mem.initialized = vec![true; num_classes];
        mem.frozen = true;
        Ok(mem)
    }

    pub fn num_classes(&self) -> usize {
        self.slots.rows()
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn slots(&self) -> &Matrix {
        &self.slots
    }

    pub fn prototype(&self, class_id: usize) -> &[f64] {
        self.slots.row(class_id)
    }

    pub fn is_initialized(&self, class_id: usize) -> bool {
        self.initialized[class_id]
    }

    /// A slot is read-eligible once it has been written and its norm is
    /// above the degeneracy floor.
    pub fn is_eligible(&self, class_id: usize) -> bool {
        self.initialized[class_id] && norm(self.slots.row(class_id)) > NORM_FLOOR
    }

    pub fn eligible_indices(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&i| self.is_eligible(i))
            .collect()
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible_indices().len()
    }

    fn check_feature(&self, f: &[f64], op: &'static str) -> Result<()> {
        if f.len() != self.dim() {
            return Err(Error::Length {
                op,
                lhs: f.len(),
                rhs: self.dim(),
            });
        }
        if let Some(bad) = f.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{op}: feature contains non-finite value {bad}"
            )));
        }
        Ok(())
    }

    /// Moving-average write of one feature into its class slot.
    ///
    /// The first write to a slot stores the feature verbatim and marks the
    /// slot initialized; later writes apply
    /// `m <- (1 - beta) * m + beta * f`.
    pub fn write_update(&mut self, class_id: usize, feature: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenMemory);
        }
        if class_id >= self.num_classes() {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: class_id,
                size: self.num_classes(),
            });
        }
        self.check_feature(feature, "write_update")?;
        let beta = self.beta;
        let slot = self.slots.row_mut(class_id);
        if self.initialized[class_id] {
            for (m, f) in slot.iter_mut().zip(feature) {
                *m = (1.0 - beta) * *m + beta * f;
            }
        } else {
            slot.copy_from_slice(feature);
            self.initialized[class_id] = true;
        }
        Ok(())
    }

    /// One moving-average step per class present in the batch, using the
    /// mean feature of that class within the batch. Grouping by class makes
    /// the result independent of sample order.
    pub fn batch_write(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenMemory);
        }
        if features.rows() != labels.len() {
            return Err(Error::Length {
                op: "batch_write",
                lhs: features.rows(),
                rhs: labels.len(),
            });
        }
        if features.rows() > 0 && features.cols() != self.dim() {
            return Err(Error::Length {
                op: "batch_write",
                lhs: features.cols(),
                rhs: self.dim(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: bad,
                size: self.num_classes(),
            });
        }
        for class_id in 0..self.num_classes() {
            let mut mean = vec![0.0; self.dim()];
            let mut count = 0usize;
            for (row, &label) in labels.iter().enumerate().map(|(r, l)| (r, l)) {
                if label == class_id {
                    axpy(1.0, features.row(row), &mut mean);
                    count += 1;
                }
            }
            if count > 0 {
                for v in mean.iter_mut() {
                    *v /= count as f64;
                }
                self.write_update(class_id, &mean)?;
            }
        }
        Ok(())
    }

    fn similarity(&self, f: &[f64], slot: usize, metric: Similarity) -> Result<f64> {
        match metric {
            Similarity::Cosine => cosine(f, self.slots.row(slot)),
            Similarity::Dot => Ok(dot(f, self.slots.row(slot))),
        }
    }

    /// Softmaxed similarity scores between the query and every eligible
    /// prototype, at temperature `tau`; zero at ineligible slots. All-zero
    /// when nothing is eligible.
    pub fn attention_scores(&self, f: &[f64], metric: Similarity) -> Result<Vec<f64>> {
        self.check_feature(f, "attention_scores")?;
        let eligible = self.eligible_indices();
        let mut weights = vec![0.0; self.num_classes()];
        if eligible.is_empty() {
            return Ok(weights);
        }
        let scores: Vec<f64> = eligible
            .iter()
            .map(|&i| self.similarity(f, i, metric))
            .collect::<Result<_>>()?;
        let soft = stable_softmax(&scores, self.tau)?;
        for (&i, w) in eligible.iter().zip(soft) {
            weights[i] = w;
        }
        Ok(weights)
    }

    /// Indices of the `k` largest weights among `eligible`, ties broken by
    /// lower class index. Returned in ascending index order.
    fn select_top_k(weights: &[f64], eligible: &[usize], k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = eligible.to_vec();
        order.sort_by(|&a, &b| {
            weights[b]
                .partial_cmp(&weights[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = order.into_iter().take(k).collect();
        kept.sort_unstable();
        kept
    }

    fn check_top_k(&self, k: usize, eligible_count: usize) -> Result<()> {
        if k == 0 || k > self.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "top-k must satisfy 1 <= k <= {}, got {k}",
                self.num_classes()
            )));
        }
        if k > eligible_count {
            return Err(Error::InvalidArgument(format!(
                "top-k {k} exceeds the {eligible_count} read-eligible slots"
            )));
        }
        Ok(())
    }

    /// Retrieves the response feature for a query.
    ///
    /// With no eligible slots the weights and response are all-zero,
    /// whatever the mode. Equal mode computes the response as the
    /// arithmetic mean of the eligible prototypes so the uniform case is
    /// exact.
    pub fn read(&self, f: &[f64], mode: ReadMode, metric: Similarity) -> Result<ReadResult> {
        self.check_feature(f, "read")?;
        let eligible = self.eligible_indices();
        let c = self.num_classes();
        let d = self.dim();
        if eligible.is_empty() {
            return Ok(ReadResult {
                weights: vec![0.0; c],
                response: vec![0.0; d],
                eligible_count: 0,
            });
        }

        let mut weights = vec![0.0; c];
        let mut response = vec![0.0; d];
        match mode {
            ReadMode::Attention => {
                weights = self.attention_scores(f, metric)?;
            }
            ReadMode::Equal => {
                let w = 1.0 / eligible.len() as f64;
                for &i in &eligible {
                    weights[i] = w;
                    axpy(1.0, self.slots.row(i), &mut response);
                }
                for v in response.iter_mut() {
                    *v /= eligible.len() as f64;
                }
                return Ok(ReadResult {
                    weights,
                    response,
                    eligible_count: eligible.len(),
                });
            }
            ReadMode::TopK(k) => {
                self.check_top_k(k, eligible.len())?;
                let attention = self.attention_scores(f, metric)?;
                if k == eligible.len() {
                    weights = attention;
                } else {
                    let kept = Self::select_top_k(&attention, &eligible, k);
                    let total: f64 = kept.iter().map(|&i| attention[i]).sum();
                    for &i in &kept {
                        weights[i] = attention[i] / total;
                    }
                }
            }
            ReadMode::Predicted(params) => {
                params.check_shape(c, d)?;
                let logits = {
                    let mut z = matvec(&params.weight, f)?;
                    for (zi, b) in z.iter_mut().zip(&params.bias) {
                        *zi += b;
                    }
                    z
                };
                let restricted: Vec<f64> = eligible.iter().map(|&i| logits[i]).collect();
                let soft = stable_softmax(&restricted, 1.0)?;
                for (&i, w) in eligible.iter().zip(soft) {
                    weights[i] = w;
                }
            }
        }
        for &i in &eligible {
            if weights[i] != 0.0 {
                axpy(weights[i], self.slots.row(i), &mut response);
            }
        }
        Ok(ReadResult {
            weights,
            response,
            eligible_count: eligible.len(),
        })
    }

    /// Gradient of `<upstream, augment(f, read(f).response)>` with respect
    /// to `f`: `upstream + J^T upstream`, where `J` is the Jacobian of the
    /// response. Prototypes are constants (their update rule is the moving
    /// average, not gradient descent). Equal mode and top-k's selection
    /// pattern are locally constant, so gradient flows only through the
    /// surviving softmax weights.
    pub fn read_backward(
        &self,
        f: &[f64],
        mode: ReadMode,
        metric: Similarity,
        upstream: &[f64],
    ) -> Result<ReadBackward> {
        self.check_feature(f, "read_backward")?;
        if upstream.len() != self.dim() {
            return Err(Error::Length {
                op: "read_backward",
                lhs: upstream.len(),
                rhs: self.dim(),
            });
        }
        let eligible = self.eligible_indices();
        let predictor_zeros = |c: usize, d: usize| (Matrix::zeros(c, d), vec![0.0; c]);

        if eligible.is_empty() {
            let predictor = match mode {
                ReadMode::Predicted(_) => {
                    Some(predictor_zeros(self.num_classes(), self.dim()))
                }
                _ => None,
            };
            return Ok(ReadBackward {
                grad_input: upstream.to_vec(),
                predictor,
            });
        }

        let mut grad = upstream.to_vec();
        match mode {
            ReadMode::Equal => {}
            ReadMode::Attention => {
                self.attention_like_backward(f, metric, upstream, &eligible, &mut grad)?;
            }
            ReadMode::TopK(k) => {
                self.check_top_k(k, eligible.len())?;
                if k == eligible.len() {
                    self.attention_like_backward(f, metric, upstream, &eligible, &mut grad)?;
                } else {
                    let attention = self.attention_scores(f, metric)?;
                    let kept = Self::select_top_k(&attention, &eligible, k);
                    self.attention_like_backward(f, metric, upstream, &kept, &mut grad)?;
                }
            }
            ReadMode::Predicted(params) => {
                params.check_shape(self.num_classes(), self.dim())?;
                let read = self.read(f, mode, metric)?;
                // b_i = w_i (m_i . u - sum_j w_j m_j . u), tau = 1.
                let slot_dots: Vec<f64> = eligible
                    .iter()
                    .map(|&i| dot(self.slots.row(i), upstream))
                    .collect();
                let mean_dot: f64 = eligible
                    .iter()
                    .zip(&slot_dots)
                    .map(|(&i, a)| read.weights[i] * a)
                    .sum();
                let mut d_weight = Matrix::zeros(self.num_classes(), self.dim());
                let mut d_bias = vec![0.0; self.num_classes()];
                for (&i, a) in eligible.iter().zip(&slot_dots) {
                    let b = read.weights[i] * (a - mean_dot);
                    axpy(b, params.weight.row(i), &mut grad);
                    axpy(b, f, d_weight.row_mut(i));
                    d_bias[i] = b;
                }
                return Ok(ReadBackward {
                    grad_input: grad,
                    predictor: Some((d_weight, d_bias)),
                });
            }
        }
        Ok(ReadBackward {
            grad_input: grad,
            predictor: None,
        })
    }

    /// Adds the attention-path Jacobian term over `active` slots:
    /// `sum_i b_i ds_i/df` with `b_i = w_i (m_i . u - mean) / tau` and `w`
    /// the softmax over the active scores. Used by both the full attention
    /// mode (`active` = all eligible) and top-k (`active` = survivors),
    /// since the renormalized top-k weights equal the softmax over the
    /// surviving scores.
    fn attention_like_backward(
        &self,
        f: &[f64],
        metric: Similarity,
        upstream: &[f64],
        active: &[usize],
        grad: &mut [f64],
    ) -> Result<()> {
        let scores: Vec<f64> = active
            .iter()
            .map(|&i| self.similarity(f, i, metric))
            .collect::<Result<_>>()?;
        let weights = stable_softmax(&scores, self.tau)?;
        let slot_dots: Vec<f64> = active
            .iter()
            .map(|&i| dot(self.slots.row(i), upstream))
            .collect();
        let mean_dot: f64 = weights.iter().zip(&slot_dots).map(|(w, a)| w * a).sum();

        let f_norm = norm(f);
        for ((&i, w), (s, a)) in active
            .iter()
            .zip(&weights)
            .zip(scores.iter().zip(&slot_dots))
        {
            let b = w * (a - mean_dot) / self.tau;
            match metric {
                Similarity::Cosine => {
                    // ds/df = (m / |m| - s * f / |f|) / |f|
                    let slot = self.slots.row(i);
                    let slot_norm = norm(slot);
                    for ((g, m), fv) in grad.iter_mut().zip(slot).zip(f) {
                        *g += b * (m / slot_norm - s * fv / f_norm) / f_norm;
                    }
                }
                Similarity::Dot => {
                    axpy(b, self.slots.row(i), grad);
                }
            }
        }
        Ok(())
    }

    /// Binary snapshot. Layout: magic `CMNM`, version u16, C u32, D u32,
    /// beta f64, tau f64, frozen u8, C initialized-flag bytes, then `C*D`
    /// little-endian f64 row-major slot values.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(31 + self.num_classes() * (1 + 8 * self.dim()));
        self.write_bytes(&mut out);
        out
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        put_u16(out, SNAPSHOT_VERSION);
        put_u32(out, self.num_classes() as u32);
        put_u32(out, self.dim() as u32);
        put_f64(out, self.beta);
        put_f64(out, self.tau);
        out.push(self.frozen as u8);
        for &flag in &self.initialized {
            out.push(flag as u8);
        }
        for v in self.slots.data() {
            put_f64(out, *v);
        }
    }

    /// Inverse of [`Self::snapshot`]; the round-trip is bit-exact.
    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mem = Self::read_bytes(&mut cur)?;
        cur.expect_end()?;
        Ok(mem)
    }

    pub(crate) fn read_bytes(cur: &mut Cursor) -> Result<Self> {
        let at = cur.pos();
        let magic = cur.take(4)?;
        if magic != SNAPSHOT_MAGIC {
            return Err(Error::parse_at_byte(at, "bad magic, expected CMNM"));
        }
        let at = cur.pos();
        let version = cur.read_u16()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::parse_at_byte(
                at,
                format!("unsupported snapshot version {version}"),
            ));
        }
        let num_classes = cur.read_u32()? as usize;
        let dim = cur.read_u32()? as usize;
        let at = cur.pos();
        let beta = cur.read_f64()?;
        let tau = cur.read_f64()?;
        if !(beta > 0.0 && beta < 1.0) || !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::parse_at_byte(
                at,
                format!("beta {beta} / tau {tau} out of range"),
            ));
        }
        let at = cur.pos();
        let frozen = match cur.read_u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::parse_at_byte(at, format!("bad frozen flag {v}"))),
        };
        let mut initialized = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            let at = cur.pos();
            initialized.push(match cur.read_u8()? {
                0 => false,
                1 => true,
                v => {
                    return Err(Error::parse_at_byte(at, format!("bad slot flag {v}")));
                }
            });
        }
        let mut data = Vec::with_capacity(num_classes * dim);
        for _ in 0..num_classes * dim {
            data.push(cur.read_f64()?);
        }
        for (i, &init) in initialized.iter().enumerate() {
            if init {
                let row = &data[i * dim..(i + 1) * dim];
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::parse_at_byte(
                        0,
                        format!("initialized slot {i} contains non-finite values"),
                    ));
                }
            }
        }
        Ok(CategoricalMemory {
            slots: Matrix::from_vec(num_classes, dim, data)?,
            initialized,
            beta,
            tau,
            frozen,
        })
    }

    /// CSV export for inspection: one row per class, first column the class
    /// id, then the D slot values.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.num_classes() {
            out.push_str(&i.to_string());
            for v in self.slots.row(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Feature augmentation: elementwise `f + response`.
pub fn augment(f: &[f64], response: &[f64]) -> Result<Vec<f64>> {
    if f.len() != response.len() {
        return Err(Error::Length {
            op: "augment",
            lhs: f.len(),
            rhs: response.len(),
        });
    }
    Ok(f.iter().zip(response).map(|(a, b)| a + b).collect())
}
