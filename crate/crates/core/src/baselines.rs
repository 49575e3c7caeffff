//! Non-LLM predictors: the user's context average and matrix factorisation
//! trained by alternating least squares.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EvalInstance, RatingScale};

const FORMAT_HEADER: &str = "ratingbench-mf v1";
const INIT_SCALE: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("instance {0} has an empty context")]
    EmptyContext(String),
    #[error("no training triples")]
    NoTriples,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("rating {rating} of ({user}, {item}) is outside the scale")]
    OutOfScale { user: String, item: String, rating: i64 },
    #[error("model file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mean of the context ratings.
pub fn user_average(instance: &EvalInstance) -> Result<f64, BaselineError> {
    if instance.context.is_empty() {
        return Err(BaselineError::EmptyContext(instance.instance_id.clone()));
    }
    let sum: i64 = instance.context.iter().map(|r| r.rating).sum();
    Ok(sum as f64 / instance.context.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RatingTriple {
    pub user_id: String,
    pub item_id: String,
    pub rating: i64,
}

/// Real-valued observation, used for synthetic data and internally by the
/// solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealTriple {
    pub user_id: String,
    pub item_id: String,
    pub value: f64,
}

impl From<&RatingTriple> for RealTriple {
    fn from(t: &RatingTriple) -> Self {
        Self { user_id: t.user_id.clone(), item_id: t.item_id.clone(), value: t.rating as f64 }
    }
}

pub fn to_real(triples: &[RatingTriple]) -> Vec<RealTriple> {
    triples.iter().map(RealTriple::from).collect()
}

/// Every context rating of every instance; targets are never included.
pub fn triples_from_contexts(dataset: &[EvalInstance]) -> Vec<RatingTriple> {
    dataset
        .iter()
        .flat_map(|inst| {
            inst.context.iter().map(|r| RatingTriple {
                user_id: r.user_id.clone(),
                item_id: r.item_id.clone(),
                rating: r.rating,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfHyper {
    pub d: usize,
    pub lambda: f64,
    pub iterations: u32,
    pub seed: u64,
}

impl Default for MfHyper {
    fn default() -> Self {
        Self { d: 8, lambda: 0.1, iterations: 20, seed: 0 }
    }
}

impl MfHyper {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.d == 0 {
            return Err(BaselineError::InvalidHyper("d must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(BaselineError::InvalidHyper(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.iterations == 0 {
            return Err(BaselineError::InvalidHyper("iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    pub user_factors: BTreeMap<String, Vec<f64>>,
    pub item_factors: BTreeMap<String, Vec<f64>>,
    pub global_mean: f64,
    pub hyper: MfHyper,
}

/// Index-based view of the training data shared by the solver passes.
struct Problem {
    users: Vec<String>,
    items: Vec<String>,
    /// (user index, item index, centred rating), canonically sorted.
    cells: Vec<(usize, usize, f64)>,
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
    mean: f64,
}

impl Problem {
    fn new(triples: &[RealTriple]) -> Self {
        let mut sorted = triples.to_vec();
        sorted.sort_by(|a, b| {
            (&a.user_id, &a.item_id).cmp(&(&b.user_id, &b.item_id)).then(a.value.total_cmp(&b.value))
        });
        let mean = sorted.iter().map(|t| t.value).sum::<f64>() / sorted.len() as f64;
        let index = |ids: Vec<&String>| {
            let mut v: Vec<String> = ids.into_iter().cloned().collect();
            v.sort();
            v.dedup();
            let map: HashMap<String, usize> = v.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
            (v, map)
        };
        let (users, uidx) = index(sorted.iter().map(|t| &t.user_id).collect());
        let (items, iidx) = index(sorted.iter().map(|t| &t.item_id).collect());
        let cells: Vec<_> =
            sorted.iter().map(|t| (uidx[&t.user_id], iidx[&t.item_id], t.value - mean)).collect();
        let mut by_user = vec![Vec::new(); users.len()];
        let mut by_item = vec![Vec::new(); items.len()];
        for (c, &(u, i, _)) in cells.iter().enumerate() {
            by_user[u].push(c);
            by_item[i].push(c);
        }
        Self { users, items, cells, by_user, by_item, mean }
    }
}

type Factors = Vec<DVector<f64>>;

fn dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b)
}

/// Solves min_x Σ (r − x·y)² + λ‖x‖² for each row of `target` with `other`
/// fixed, using the cells listed for that row.
fn solve_side(
    target: &mut Factors,
    other: &Factors,
    rows: &[Vec<usize>],
    cells: &[(usize, usize, f64)],
    other_of: impl Fn(&(usize, usize, f64)) -> usize,
    d: usize,
    lambda: f64,
) {
    for (row, list) in rows.iter().enumerate() {
        let mut a = DMatrix::<f64>::identity(d, d) * lambda;
        let mut b = DVector::<f64>::zeros(d);
        for &c in list {
            let v = &other[other_of(&cells[c])];
            a.syger(1.0, v, v, 1.0);
            b.axpy(cells[c].2, v, 1.0);
        }
        let chol = a.cholesky().expect("ridge normal equations are positive definite");
        target[row] = chol.solve(&b);
    }
}

fn objective_of(p: &Problem, u: &Factors, v: &Factors, lambda: f64) -> f64 {
    let sse: f64 = p.cells.iter().map(|&(a, b, r)| (r - dot(&u[a], &v[b])).powi(2)).sum();
    let reg: f64 = u.iter().chain(v.iter()).map(|x| x.norm_squared()).sum();
    sse + lambda * reg
}

/// Trains a model and returns it with the objective value before training
/// and after every half-sweep (user solve, then item solve).
pub fn train_mf_with_trace(
    triples: &[RealTriple],
    hyper: &MfHyper,
) -> Result<(MfModel, Vec<f64>), BaselineError> {
    hyper.validate()?;
    if triples.is_empty() {
        return Err(BaselineError::NoTriples);
    }
    let p = Problem::new(triples);
    let d = hyper.d;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut init = |n: usize| -> Factors {
        (0..n)
            .map(|_| DVector::from_iterator(d, (0..d).map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))))
            .collect()
    };
    let mut u = init(p.users.len());
    let mut v = init(p.items.len());

    let mut trace = vec![objective_of(&p, &u, &v, hyper.lambda)];
    for _ in 0..hyper.iterations {
        solve_side(&mut u, &v, &p.by_user, &p.cells, |c| c.1, d, hyper.lambda);
        trace.push(objective_of(&p, &u, &v, hyper.lambda));
        solve_side(&mut v, &u, &p.by_item, &p.cells, |c| c.0, d, hyper.lambda);
        trace.push(objective_of(&p, &u, &v, hyper.lambda));
    }

    let to_map = |ids: &[String], f: &Factors| -> BTreeMap<String, Vec<f64>> {
        ids.iter().cloned().zip(f.iter().map(|x| x.iter().copied().collect())).collect()
    };
    let model = MfModel {
        user_factors: to_map(&p.users, &u),
        item_factors: to_map(&p.items, &v),
        global_mean: p.mean,
        hyper: *hyper,
    };
    Ok((model, trace))
}

pub fn train_mf(triples: &[RatingTriple], hyper: &MfHyper) -> Result<MfModel, BaselineError> {
    train_mf_real(&to_real(triples), hyper)
}

pub fn train_mf_real(triples: &[RealTriple], hyper: &MfHyper) -> Result<MfModel, BaselineError> {
    train_mf_with_trace(triples, hyper).map(|(m, _)| m)
}

/// Checks every triple lies on the scale before training.
pub fn check_triples(triples: &[RatingTriple], scale: RatingScale) -> Result<(), BaselineError> {
    match triples.iter().find(|t| !scale.contains(t.rating)) {
        Some(t) => Err(BaselineError::OutOfScale {
            user: t.user_id.clone(),
            item: t.item_id.clone(),
            rating: t.rating,
        }),
        None => Ok(()),
    }
}

impl MfModel {
    /// Unclamped prediction; the global mean when either side is unseen.
    pub fn raw_prediction(&self, user_id: &str, item_id: &str) -> f64 {
        match (self.user_factors.get(user_id), self.item_factors.get(item_id)) {
            (Some(u), Some(v)) => self.global_mean + u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>(),
            _ => self.global_mean,
        }
    }

    /// Σ (r − μ − u·v)² + λ(‖U‖² + ‖V‖²) over `triples`.
    pub fn objective(&self, triples: &[RealTriple]) -> f64 {
        let sse: f64 = triples
            .iter()
            .map(|t| (t.value - self.raw_prediction(&t.user_id, &t.item_id)).powi(2))
            .sum();
        let reg: f64 = self.user_factors.values().chain(self.item_factors.values()).flatten().map(|x| x * x).sum();
        sse + self.hyper.lambda * reg
    }

    /// Gradient of `objective` with respect to one user's factor vector.
    pub fn user_gradient(&self, triples: &[RealTriple], user_id: &str) -> Option<Vec<f64>> {
        let u = self.user_factors.get(user_id)?;
        let mut g: Vec<f64> = u.iter().map(|x| 2.0 * self.hyper.lambda * x).collect();
        for t in triples.iter().filter(|t| t.user_id == user_id) {
            let Some(v) = self.item_factors.get(&t.item_id) else { continue };
            let resid = t.value - self.raw_prediction(&t.user_id, &t.item_id);
            for (gk, vk) in g.iter_mut().zip(v) {
                *gk -= 2.0 * resid * vk;
            }
        }
        Some(g)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let h = &self.hyper;
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(out, "d {}\nlambda {:?}\niterations {}\nseed {}", h.d, h.lambda, h.iterations, h.seed);
        let _ = writeln!(out, "global_mean {:?}", self.global_mean);
        for (tag, table) in [("users", &self.user_factors), ("items", &self.item_factors)] {
            let _ = writeln!(out, "{tag} {}", table.len());
            for (id, f) in table {
                let nums: Vec<String> = f.iter().map(|x| format!("{x:?}")).collect();
                let _ = writeln!(out, "{}\t{}", serde_json::Value::from(id.as_str()), nums.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, BaselineError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let fail = |line: usize, reason: &str| BaselineError::Format { line, reason: reason.to_string() };
        let mut next = || lines.next().ok_or_else(|| fail(0, "unexpected end of file"));

        let (n, header) = next()?;
        if header != FORMAT_HEADER {
            return Err(fail(n, "unknown format header"));
        }
        fn field<T: std::str::FromStr>(
            (n, line): (usize, &str),
            key: &str,
        ) -> Result<T, BaselineError> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| BaselineError::Format { line: n, reason: format!("expected `{key} <value>`") })
        }
        let hyper = MfHyper {
            d: field(next()?, "d")?,
            lambda: field(next()?, "lambda")?,
            iterations: field(next()?, "iterations")?,
            seed: field(next()?, "seed")?,
        };
        let global_mean = field(next()?, "global_mean")?;
        let mut tables = Vec::new();
        for key in ["users", "items"] {
            let count: usize = field(next()?, key)?;
            let mut table = BTreeMap::new();
            for _ in 0..count {
                let (n, line) = next()?;
                let (id, nums) = line.split_once('\t').ok_or_else(|| fail(n, "expected id and factors"))?;
                let id: String = serde_json::from_str(id).map_err(|_| fail(n, "bad id"))?;
                let f: Vec<f64> = nums
                    .split(' ')
                    .map(|x| x.parse().map_err(|_| fail(n, "bad factor")))
                    .collect::<Result<_, _>>()?;
                if f.len() != hyper.d {
                    return Err(fail(n, "factor length differs from d"));
                }
                table.insert(id, f);
            }
            tables.push(table);
        }
        let item_factors = tables.pop().unwrap_or_default();
        let user_factors = tables.pop().unwrap_or_default();
        Ok(Self { user_factors, item_factors, global_mean, hyper })
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        std::fs::write(path, self.to_text())
            .map_err(|source| BaselineError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| BaselineError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text)
    }
}

/// Clamped prediction for (user, item).
pub fn predict_mf(model: &MfModel, user_id: &str, item_id: &str, scale: RatingScale) -> f64 {
    scale.clamp(model.raw_prediction(user_id, item_id))
}
