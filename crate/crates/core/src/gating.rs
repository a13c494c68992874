//! Contextual persona and exemplar gates, sparse top-M selection, the mixture
//! likelihood and its gradient.
//!
//! With `x = W_x h(x)`, `g_k = W_g h(g_k)` and `e_j = W_e h(e_j)`:
//!
//! ```text
//! pi_k      = softmax_k( x . g_k )
//! Omega_kj  = softmax_j( (x + g_k) . e_j )
//! F(y | x)  = log sum_{(k,j) in top-M} pi_k Omega_kj p_LM^{tau_k}(y | g_k, e_j, x)
//! ```
//!
//! Selected weights are not renormalized, so the sparse objective is a lower
//! bound on the dense one and grows with M.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, ExemplarPool, Persona};
use crate::embed::{Embedder, EmbedderFingerprint};
use crate::lm::{tempered_loglik_and_dtau, LanguageModel, ScoreSheet};
use crate::math::{dot, fnv1a, inv_softplus, log_softmax, logsumexp, sigmoid, softplus, Matrix};
use crate::prompt::{build_prompt, PromptBundle, TaskTemplates};
use crate::rng;
use crate::{Error, Result};

pub const TAU_MIN: f64 = 0.05;
pub const TAU_INIT: f64 = 0.6;

/// Learnable state: three projections `R^{d'} -> R^d` and one unconstrained
/// temperature parameter per persona, `tau_k = softplus(rho_k) + TAU_MIN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub w_x: Matrix,
    pub w_g: Matrix,
    pub w_e: Matrix,
    pub rho: Vec<f64>,
}

impl GatingParams {
    /// Entries drawn from `N(0, 1/d_in)`; temperatures start at [`TAU_INIT`].
    pub fn init(k: usize, d: usize, d_in: usize, seed: u64) -> Self {
        let normal = Normal::new(0.0, 1.0 / libm::sqrt(d_in as f64)).expect("valid std");
        let draw = |stream: u64| {
            let mut r = rng::child_rng(seed, stream);
            Matrix::from_vec(d, d_in, (0..d * d_in).map(|_| normal.sample(&mut r)).collect())
        };
        GatingParams {
            w_x: draw(0),
            w_g: draw(1),
            w_e: draw(2),
            rho: vec![rho_for_tau(TAU_INIT); k],
        }
    }

    /// All-zero projections: uniform gates everywhere.
    pub fn uniform(k: usize, d: usize, d_in: usize) -> Self {
        GatingParams {
            w_x: Matrix::zeros(d, d_in),
            w_g: Matrix::zeros(d, d_in),
            w_e: Matrix::zeros(d, d_in),
            rho: vec![rho_for_tau(TAU_INIT); k],
        }
    }

    pub fn k(&self) -> usize {
        self.rho.len()
    }

    pub fn d(&self) -> usize {
        self.w_x.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w_x.cols()
    }

    pub fn tau(&self, k: usize) -> f64 {
        softplus(self.rho[k]) + TAU_MIN
    }

    pub fn taus(&self) -> Vec<f64> {
        (0..self.k()).map(|k| self.tau(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, d_in) = (self.d(), self.d_in());
        for (name, w) in [("w_x", &self.w_x), ("w_g", &self.w_g), ("w_e", &self.w_e)] {
            if w.rows() != d || w.cols() != d_in {
                return Err(Error::validation(format!(
                    "{name} is {}x{}, expected {d}x{d_in}",
                    w.rows(),
                    w.cols()
                )));
            }
            if !w.is_finite() {
                return Err(Error::validation(format!("{name} has non-finite entries")));
            }
        }
        if self.rho.is_empty() || self.rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::validation("temperature parameters must be finite and non-empty"));
        }
        Ok(())
    }

    /// Flat view in the fixed order `w_x, w_g, w_e, rho`.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for v in self
            .w_x
            .as_mut_slice()
            .iter_mut()
            .chain(self.w_g.as_mut_slice())
            .chain(self.w_e.as_mut_slice())
            .chain(self.rho.iter_mut())
        {
            f(v);
        }
    }

    pub fn num_params(&self) -> usize {
        3 * self.d() * self.d_in() + self.k()
    }
}

pub fn rho_for_tau(tau: f64) -> f64 {
    inv_softplus(tau - TAU_MIN)
}

/// Which text stands for an exemplar when it is embedded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarText {
    #[default]
    Response,
    ContextResponse,
}

impl ExemplarText {
    pub fn render(self, e: &Example) -> String {
        match self {
            ExemplarText::Response => e.response.clone(),
            ExemplarText::ContextResponse => format!("{}\n{}", e.context, e.response),
        }
    }
}

/// Raw embeddings of the persona descriptions and the exemplars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub persona_raw: Matrix,
    pub exemplar_raw: Matrix,
    pub fingerprint: EmbedderFingerprint,
}

impl GateState {
    pub fn build<E: Embedder + ?Sized>(
        embedder: &E,
        personas: &[Persona],
        pool: &ExemplarPool,
        text: ExemplarText,
    ) -> Result<Self> {
        let p: Vec<&str> = personas.iter().map(|p| p.description.as_str()).collect();
        let ex: Vec<String> = pool.exemplars().iter().map(|e| text.render(e)).collect();
        let ex: Vec<&str> = ex.iter().map(String::as_str).collect();
        Ok(GateState {
            persona_raw: embedder.embed_batch(&p)?,
            exemplar_raw: embedder.embed_batch(&ex)?,
            fingerprint: embedder.fingerprint(),
        })
    }

    pub fn k(&self) -> usize {
        self.persona_raw.rows()
    }

    pub fn n(&self) -> usize {
        self.exemplar_raw.rows()
    }

    pub fn d_in(&self) -> usize {
        self.persona_raw.cols()
    }

    pub fn check(&self, params: &GatingParams) -> Result<()> {
        if self.persona_raw.cols() != params.d_in() || self.exemplar_raw.cols() != params.d_in() {
            return Err(Error::validation(format!(
                "embedding dimension {} does not match parameter input dimension {}",
                self.persona_raw.cols(),
                params.d_in()
            )));
        }
        if self.k() != params.k() {
            return Err(Error::validation(format!(
                "{} personas but {} temperature parameters",
                self.k(),
                params.k()
            )));
        }
        if self.n() == 0 {
            return Err(Error::validation("exemplar pool is empty"));
        }
        Ok(())
    }
}

/// Context-independent projections, valid for one parameter value.
#[derive(Debug, Clone)]
pub struct Projected {
    /// `K x d`
    pub g: Matrix,
    /// `N x d`
    pub e: Matrix,
    /// `K x N`, `g_k . e_j`
    pub ge: Matrix,
}

impl Projected {
    pub fn new(params: &GatingParams, state: &GateState) -> Result<Self> {
        state.check(params)?;
        let g = state.persona_raw.mul_transpose(&params.w_g);
        let e = state.exemplar_raw.mul_transpose(&params.w_e);
        let ge = g.mul_transpose(&e);
        Ok(Projected { g, e, ge })
    }
}

/// Both gates at one context, in probability and log space.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates {
    pub x: Vec<f64>,
    pub pi: Vec<f64>,
    pub log_pi: Vec<f64>,
    /// `K x N`, row `k` is `Omega_k`.
    pub omega: Matrix,
    pub log_omega: Matrix,
}

fn check_x(x_raw: &[f64], params: &GatingParams) -> Result<()> {
    if x_raw.len() != params.d_in() {
        return Err(Error::validation(format!(
            "context embedding has dimension {}, expected {}",
            x_raw.len(),
            params.d_in()
        )));
    }
    Ok(())
}

pub fn gates(x_raw: &[f64], params: &GatingParams, proj: &Projected) -> Result<Gates> {
    check_x(x_raw, params)?;
    let x = params.w_x.matvec(x_raw);
    let a: Vec<f64> = proj.g.iter_rows().map(|g| dot(&x, g)).collect();
    let log_pi = log_softmax(&a);
    let xe: Vec<f64> = proj.e.iter_rows().map(|e| dot(&x, e)).collect();
    let (k, n) = (proj.g.rows(), proj.e.rows());
    let mut log_omega = Matrix::zeros(k, n);
    let mut omega = Matrix::zeros(k, n);
    for kk in 0..k {
        let b: Vec<f64> = xe.iter().zip(proj.ge.row(kk)).map(|(a, b)| a + b).collect();
        let lo = log_softmax(&b);
        for (o, l) in omega.row_mut(kk).iter_mut().zip(&lo) {
            *o = libm::exp(*l);
        }
        log_omega.row_mut(kk).copy_from_slice(&lo);
    }
    Ok(Gates {
        x,
        pi: log_pi.iter().map(|l| libm::exp(*l)).collect(),
        log_pi,
        omega,
        log_omega,
    })
}

/// `pi(x)`: probability vector over the K personas.
pub fn persona_gate(x_raw: &[f64], params: &GatingParams, state: &GateState) -> Result<Vec<f64>> {
    let proj = Projected::new(params, state)?;
    Ok(gates(x_raw, params, &proj)?.pi)
}

/// `Omega_k(x)`: probability vector over the N exemplars for persona `k`.
pub fn exemplar_gate(x_raw: &[f64], k: usize, params: &GatingParams, state: &GateState) -> Result<Vec<f64>> {
    if k >= state.k() {
        return Err(Error::validation(format!("persona index {k} out of range 0..{}", state.k())));
    }
    let proj = Projected::new(params, state)?;
    Ok(gates(x_raw, params, &proj)?.omega.row(k).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedPair {
    pub k: usize,
    pub j: usize,
    pub weight: f64,
}

/// The `m` pairs with the largest `pi_k * Omega_kj`, excluding column `mask`.
/// Ties go to the smaller `(k, j)`. Output is sorted by decreasing weight.
pub fn joint_top_m(pi: &[f64], omega: &Matrix, m: usize, mask: Option<usize>) -> Vec<SelectedPair> {
    let available = pi.len() * omega.cols() - mask.map_or(0, |j| usize::from(j < omega.cols()) * pi.len());
    if m > available {
        log::debug!("top-{m} requested but only {available} unmasked pairs exist");
    }
    let m = m.min(available);
    if m == 0 {
        return Vec::new();
    }
    // `best` stays sorted by (weight desc, k asc, j asc); scanning in (k, j)
    // order means an equal weight never displaces an earlier pair.
    let mut best: Vec<SelectedPair> = Vec::with_capacity(m + 1);
    for (k, &p) in pi.iter().enumerate() {
        for (j, &o) in omega.row(k).iter().enumerate() {
            if Some(j) == mask {
                continue;
            }
            let w = p * o;
            if best.len() == m && !(w > best[m - 1].weight) {
                continue;
            }
            let pos = best.partition_point(|s| s.weight >= w);
            best.insert(pos, SelectedPair { k, j, weight: w });
            best.truncate(m);
        }
    }
    best
}

/// How the training record itself is kept out of its own exemplar set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskRule {
    Disabled,
    /// Always exclude the record's own exemplar slot.
    #[default]
    ExcludeSelf,
    /// Exclude it with the given probability, decided by a hash of
    /// `(record id, salt)` so the choice is reproducible.
    Random { probability: f64 },
}

impl MaskRule {
    pub fn validate(&self) -> Result<()> {
        if let MaskRule::Random { probability } = self {
            if !(0.0..=1.0).contains(probability) {
                return Err(Error::validation("mask probability must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn mask_for(&self, pool: &ExemplarPool, record_id: &str, salt: u64) -> Option<usize> {
        match *self {
            MaskRule::Disabled => None,
            MaskRule::ExcludeSelf => pool.index_of(record_id),
            MaskRule::Random { probability } => {
                let j = pool.index_of(record_id)?;
                let h = rng::mix64(fnv1a(record_id.as_bytes()) ^ rng::mix64(salt));
                let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                (u < probability).then_some(j)
            }
        }
    }
}

/// Frozen agents: persona texts, exemplars, templates and the backend.
pub struct Agents<'a, L: ?Sized> {
    pub personas: &'a [Persona],
    pub pool: &'a ExemplarPool,
    pub templates: &'a TaskTemplates,
    pub backend: &'a L,
}

impl<L: ?Sized> Clone for Agents<'_, L> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<L: ?Sized> Copy for Agents<'_, L> {}

impl<'a, L: LanguageModel + ?Sized> Agents<'a, L> {
    pub fn new(personas: &'a [Persona], pool: &'a ExemplarPool, templates: &'a TaskTemplates, backend: &'a L) -> Self {
        Agents {
            personas,
            pool,
            templates,
            backend,
        }
    }

    pub fn prompt(&self, k: usize, j: usize, context: &str) -> Result<String> {
        build_prompt(
            self.templates,
            &PromptBundle::new(&self.personas[k].description, self.pool.get(j), context),
        )
    }

    /// Score sheet of `response` under agent `(k, j)` at `context`.
    pub fn sheet(&self, k: usize, j: usize, context: &str, response: &str) -> Result<Arc<ScoreSheet>> {
        let prompt = self.prompt(k, j, context)?;
        self.backend.score(&prompt, response).map_err(|e| e.at_pair(k, j))
    }
}

/// One observation with its context embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<'a> {
    pub example: &'a Example,
    pub x_raw: &'a [f64],
    pub mask: Option<usize>,
}

/// Everything needed to differentiate one record's objective.
#[derive(Debug, Clone)]
struct Terms {
    gates: Gates,
    pairs: Vec<SelectedPair>,
    /// `log pi_k + log Omega_kj + loglik`
    scores: Vec<f64>,
    dtau: Vec<f64>,
    value: f64,
}

fn terms<L: LanguageModel + ?Sized>(
    obs: &Observation<'_>,
    params: &GatingParams,
    proj: &Projected,
    agents: Agents<'_, L>,
    m: usize,
) -> Result<Terms> {
    if m == 0 {
        return Err(Error::validation("top-M must be at least 1"));
    }
    let g = gates(obs.x_raw, params, proj)?;
    let pairs = joint_top_m(&g.pi, &g.omega, m, obs.mask);
    if pairs.is_empty() {
        return Err(Error::validation(format!(
            "record {} has no unmasked exemplar pair",
            obs.example.id
        )));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    let mut dtau = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let sheet = agents.sheet(p.k, p.j, &obs.example.context, &obs.example.response)?;
        let (ll, dl) = tempered_loglik_and_dtau(&sheet, params.tau(p.k)).map_err(|e| e.at_pair(p.k, p.j))?;
        scores.push(g.log_pi[p.k] + g.log_omega[(p.k, p.j)] + ll);
        dtau.push(dl);
    }
    let value = logsumexp(&scores);
    if !value.is_finite() {
        return Err(Error::Numerical {
            record: obs.example.id.clone(),
            what: "log-likelihood".into(),
        });
    }
    Ok(Terms {
        gates: g,
        pairs,
        scores,
        dtau,
        value,
    })
}

/// Top-M mixture log-likelihood of one observation.
pub fn mixture_loglik<L: LanguageModel + ?Sized>(
    obs: &Observation<'_>,
    params: &GatingParams,
    proj: &Projected,
    agents: Agents<'_, L>,
    m: usize,
) -> Result<f64> {
    Ok(terms(obs, params, proj, agents, m)?.value)
}

/// Dense mixture log-likelihood over every unmasked pair.
pub fn dense_loglik<L: LanguageModel + ?Sized>(
    obs: &Observation<'_>,
    params: &GatingParams,
    proj: &Projected,
    agents: Agents<'_, L>,
) -> Result<f64> {
    mixture_loglik(obs, params, proj, agents, proj.g.rows() * proj.e.rows())
}

/// Gradient container shaped like [`GatingParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_x: Matrix,
    pub w_g: Matrix,
    pub w_e: Matrix,
    pub rho: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &GatingParams) -> Self {
        Gradients {
            w_x: Matrix::zeros(p.d(), p.d_in()),
            w_g: Matrix::zeros(p.d(), p.d_in()),
            w_e: Matrix::zeros(p.d(), p.d_in()),
            rho: vec![0.0; p.k()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_x
            .as_slice()
            .iter()
            .chain(self.w_g.as_slice())
            .chain(self.w_e.as_slice())
            .chain(&self.rho)
            .copied()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

/// Mean negative log-likelihood of a batch and its gradient.
///
/// The top-M selection and masks are held fixed within the call.
/// Accumulation order is the batch order, then selection order, so the
/// result is bit-reproducible.
pub fn grad_objective<L: LanguageModel + ?Sized>(
    batch: &[Observation<'_>],
    params: &GatingParams,
    state: &GateState,
    agents: Agents<'_, L>,
    m: usize,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let proj = Projected::new(params, state)?;
    let (k_count, n, d) = (state.k(), state.n(), params.d());
    let scale = -1.0 / batch.len() as f64;
    let mut grad = Gradients::zeros_like(params);
    let mut dg = Matrix::zeros(k_count, d);
    let mut de = Matrix::zeros(n, d);
    let mut loss = 0.0;
    let mut resp_k = vec![0.0; k_count];
    let mut active: Vec<usize> = Vec::new();

    for obs in batch {
        let t = terms(obs, params, &proj, agents, m)?;
        loss -= t.value;
        let x = &t.gates.x;

        // responsibilities and per-persona totals
        resp_k.iter_mut().for_each(|r| *r = 0.0);
        active.clear();
        let resp: Vec<f64> = t.scores.iter().map(|s| libm::exp(s - t.value)).collect();
        for ((p, &r), &dl) in t.pairs.iter().zip(&resp).zip(&t.dtau) {
            if !active.contains(&p.k) {
                active.push(p.k);
            }
            resp_k[p.k] += r;
            grad.rho[p.k] += scale * r * dl * sigmoid(params.rho[p.k]);
        }
        active.sort_unstable();

        let mut dx = vec![0.0; d];
        // persona logits a_k = x . g_k
        for kk in 0..k_count {
            let u = resp_k[kk] - t.gates.pi[kk];
            if u != 0.0 {
                crate::math::axpy(u, proj.g.row(kk), &mut dx);
                crate::math::axpy(scale * u, x, dg.row_mut(kk));
            }
        }
        // exemplar logits b_kj = (x + g_k) . e_j, non-zero only for active rows
        for &kk in &active {
            let mut v: Vec<f64> = t.gates.omega.row(kk).iter().map(|o| -resp_k[kk] * o).collect();
            for (p, &r) in t.pairs.iter().zip(&resp) {
                if p.k == kk {
                    v[p.j] += r;
                }
            }
            let xg: Vec<f64> = x.iter().zip(proj.g.row(kk)).map(|(a, b)| a + b).collect();
            let mut sum_ve = vec![0.0; d];
            for (j, &vj) in v.iter().enumerate() {
                if vj != 0.0 {
                    crate::math::axpy(vj, proj.e.row(j), &mut sum_ve);
                    crate::math::axpy(scale * vj, &xg, de.row_mut(j));
                }
            }
            crate::math::axpy(1.0, &sum_ve, &mut dx);
            crate::math::axpy(scale, &sum_ve, dg.row_mut(kk));
        }
        grad.w_x.add_outer(scale, &dx, obs.x_raw);
        if !dx.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical {
                record: obs.example.id.clone(),
                what: "gradient".into(),
            });
        }
    }
    // W_g += dG^T H_g, W_e += dE^T H_e
    grad.w_g = dg.transpose().matmul(&state.persona_raw);
    grad.w_e = de.transpose().matmul(&state.exemplar_raw);
    if !grad.is_finite() {
        let id = batch.first().map(|o| o.example.id.clone()).unwrap_or_default();
        return Err(Error::Numerical {
            record: id,
            what: "gradient".into(),
        });
    }
    Ok((loss / batch.len() as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softmax;

    #[test]
    fn hand_softmax_of_three_logits() {
        let p = softmax(&[1.0, 0.0, -1.0]);
        for (a, b) in p.iter().zip([0.6652, 0.2447, 0.0900]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn top_m_breaks_ties_lexicographically() {
        let pi = [0.5, 0.5];
        let omega = Matrix::from_vec(2, 3, vec![1.0 / 3.0; 6]);
        let s = joint_top_m(&pi, &omega, 3, Some(0));
        let kj: Vec<(usize, usize)> = s.iter().map(|p| (p.k, p.j)).collect();
        assert_eq!(kj, vec![(0, 1), (0, 2), (1, 1)]);
    }

    #[test]
    fn top_m_caps_at_unmasked_count() {
        let pi = [1.0];
        let omega = Matrix::from_vec(1, 2, vec![0.5, 0.5]);
        assert_eq!(joint_top_m(&pi, &omega, 5, Some(1)).len(), 1);
        assert_eq!(joint_top_m(&pi, &omega, 5, None).len(), 2);
    }

    #[test]
    fn init_temperature() {
        let p = GatingParams::init(3, 4, 8, 1);
        for t in p.taus() {
            assert!((t - TAU_INIT).abs() < 1e-12);
        }
        assert_eq!(p, GatingParams::init(3, 4, 8, 1));
        assert_ne!(p.w_x, p.w_g);
    }

    #[test]
    fn random_mask_is_reproducible() {
        let pool = ExemplarPool::new(vec![Example {
            id: "a".into(),
            context: String::new(),
            response: "r".into(),
        }])
        .unwrap();
        let rule = MaskRule::Random { probability: 0.5 };
        let hits = (0..1000).filter(|s| rule.mask_for(&pool, "a", *s).is_some()).count();
        assert!((400..600).contains(&hits), "{hits}");
        assert_eq!(rule.mask_for(&pool, "a", 7), rule.mask_for(&pool, "a", 7));
        assert_eq!(MaskRule::Random { probability: 1.0 }.mask_for(&pool, "a", 3), Some(0));
        assert_eq!(MaskRule::ExcludeSelf.mask_for(&pool, "b", 3), None);
    }
}
