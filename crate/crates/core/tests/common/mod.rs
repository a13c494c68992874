#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use mop_core::corpus::{Example, ExemplarPool, Persona};
use mop_core::embed::{Embedder, HashingEmbedder};
use mop_core::gating::{Agents, ExemplarText, GateState, GatingParams, Observation};
use mop_core::lm::{CharNgramLm, CharVocab, LanguageModel, NgramConfig, ScoreSheet};
use mop_core::math::Matrix;
use mop_core::prompt::TaskTemplates;
use mop_core::rng;
use mop_core::Result;
use rand::Rng;

pub const WORDS: &[&str] = &[
    "goal", "match", "stock", "bank", "chip", "cloud", "rose", "soil", "rain", "wind", "lamp", "door",
];

pub fn sentence(r: &mut impl Rng, words: usize) -> String {
    (0..words)
        .map(|_| WORDS[r.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn toy_backend(seed: u64) -> CharNgramLm {
    let mut r = rng::rng_from(seed);
    let docs: Vec<String> = (0..60).map(|_| sentence(&mut r, 6)).collect();
    CharNgramLm::train(
        CharVocab::ascii(),
        NgramConfig {
            order: 3,
            alpha: 0.1,
            cache_weight: 0.5,
        },
        &docs,
    )
    .unwrap()
}

/// Memoizes score sheets; counts the calls that reach the inner model.
pub struct Memo<L> {
    pub inner: L,
    pub sheets: RefCell<HashMap<(String, String), Arc<ScoreSheet>>>,
    pub calls: RefCell<u64>,
}

impl<L> Memo<L> {
    pub fn new(inner: L) -> Self {
        Memo {
            inner,
            sheets: RefCell::new(HashMap::new()),
            calls: RefCell::new(0),
        }
    }
}

impl<L: LanguageModel> LanguageModel for Memo<L> {
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
    fn score(&self, prompt: &str, continuation: &str) -> Result<Arc<ScoreSheet>> {
        let key = (prompt.to_string(), continuation.to_string());
        if let Some(s) = self.sheets.borrow().get(&key) {
            return Ok(s.clone());
        }
        *self.calls.borrow_mut() += 1;
        let s = self.inner.score(prompt, continuation)?;
        self.sheets.borrow_mut().insert(key, s.clone());
        Ok(s)
    }
    fn generate(&self, prompt: &str, tau: f64, max_tokens: usize, seed: u64) -> Result<String> {
        self.inner.generate(prompt, tau, max_tokens, seed)
    }
}

/// Records every prompt passed to `generate` and answers with `reply`.
pub struct Recorder {
    pub reply: String,
    pub prompts: RefCell<Vec<String>>,
}

impl Recorder {
    pub fn new(reply: &str) -> Self {
        Recorder {
            reply: reply.to_string(),
            prompts: RefCell::new(Vec::new()),
        }
    }
}

impl LanguageModel for Recorder {
    fn fingerprint(&self) -> String {
        "recorder".into()
    }
    fn score(&self, _prompt: &str, _continuation: &str) -> Result<Arc<ScoreSheet>> {
        unimplemented!("recorder does not score")
    }
    fn generate(&self, prompt: &str, _tau: f64, _max_tokens: usize, _seed: u64) -> Result<String> {
        self.prompts.borrow_mut().push(prompt.to_string());
        Ok(self.reply.clone())
    }
}

/// Random personas, pool and records over a shared word list.
pub struct Instance {
    pub personas: Vec<Persona>,
    pub pool: ExemplarPool,
    pub records: Vec<Example>,
    pub templates: TaskTemplates,
    pub embedder: HashingEmbedder,
    pub state: GateState,
    pub x: Vec<Vec<f64>>,
}

impl Instance {
    pub fn new(k: usize, n: usize, records: usize, d_in: usize, seed: u64) -> Self {
        let mut r = rng::rng_from(seed);
        let personas: Vec<Persona> = (0..k)
            .map(|i| Persona::user_defined(i, format!("writer of {}", sentence(&mut r, 3))))
            .collect();
        let example = |id: String, r: &mut rng::Rng| Example {
            id,
            context: sentence(r, 2),
            response: sentence(r, 4),
        };
        let pool = ExemplarPool::new((0..n).map(|j| example(format!("p{j}"), &mut r)).collect()).unwrap();
        let records: Vec<Example> = (0..records).map(|i| example(format!("r{i}"), &mut r)).collect();
        let embedder = HashingEmbedder::new(d_in, 3);
        let state = GateState::build(&embedder, &personas, &pool, ExemplarText::Response).unwrap();
        let x = records.iter().map(|e| embedder.embed(&e.context).unwrap()).collect();
        Instance {
            personas,
            pool,
            records,
            templates: TaskTemplates::builtin("plain").unwrap(),
            embedder,
            state,
            x,
        }
    }

    pub fn agents<'a, L: LanguageModel + ?Sized>(&'a self, backend: &'a L) -> Agents<'a, L> {
        Agents::new(&self.personas, &self.pool, &self.templates, backend)
    }

    pub fn observations(&self) -> Vec<Observation<'_>> {
        self.records
            .iter()
            .zip(&self.x)
            .map(|(e, x)| Observation {
                example: e,
                x_raw: x,
                mask: None,
            })
            .collect()
    }

    /// Initialized parameters with the projections scaled by `scale` and
    /// temperatures spread around the default.
    pub fn params(&self, d: usize, scale: f64, seed: u64) -> GatingParams {
        let mut p = GatingParams::init(self.personas.len(), d, self.state.d_in(), seed);
        for w in [&mut p.w_x, &mut p.w_g, &mut p.w_e] {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        }
        let mut r = rng::rng_from(seed ^ 0xabc);
        p.rho.iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
        p
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::rng_from(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect())
}

/// Random orthogonal matrix by Gram-Schmidt.
pub fn random_rotation(d: usize, seed: u64) -> Matrix {
    let a = random_matrix(d, d, seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v = a.row(i).to_vec();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    Matrix::from_rows(&q, d).unwrap()
}

/// Rows of `x` multiplied by `q^T`.
pub fn rotate(x: &Matrix, q: &Matrix) -> Matrix {
    x.mul_transpose(q)
}
