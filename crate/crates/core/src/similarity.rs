//! Target/context item similarity and the median Similar/Dissimilar split.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::EvalInstance;

pub const DEFAULT_EMBEDDING_MODEL: &str = "princeton-nlp/sup-simcse-roberta-large";

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("empty vector")]
    Empty,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("no embedding for text: {0:?}")]
    MissingEmbedding(String),
    #[error("instance {0} has an empty context")]
    EmptyContext(String),
    #[error("no score for instance {0}")]
    MissingScore(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub instance_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subset {
    Similar,
    Dissimilar,
}

impl Subset {
    pub fn label(self) -> &'static str {
        match self {
            Subset::Similar => "similar",
            Subset::Dissimilar => "dissimilar",
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::DimensionMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(SimilarityError::Empty);
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Pooled cosine similarity between the target item description and each
/// context item description.
pub fn instance_similarity(
    instance: &EvalInstance,
    embeddings: &HashMap<String, Vec<f64>>,
    pooling: Pooling,
) -> Result<SimilarityScore, SimilarityError> {
    if instance.context.is_empty() {
        return Err(SimilarityError::EmptyContext(instance.instance_id.clone()));
    }
    let lookup = |text: &String| {
        embeddings.get(text).ok_or_else(|| SimilarityError::MissingEmbedding(text.clone()))
    };
    let target = lookup(&instance.target.item_description)?;
    let sims = instance
        .context
        .iter()
        .map(|c| cosine(target, lookup(&c.item_description)?))
        .collect::<Result<Vec<_>, _>>()?;
    let score = match pooling {
        Pooling::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
        Pooling::Max => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(SimilarityScore { instance_id: instance.instance_id.clone(), score })
}

/// Every distinct item description in the dataset, in first-seen order.
pub fn texts_to_embed(dataset: &[EvalInstance]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for inst in dataset {
        for r in inst.context.iter().chain(std::iter::once(&inst.target)) {
            if seen.insert(r.item_description.as_str()) {
                out.push(r.item_description.clone());
            }
        }
    }
    out
}

/// Orders instances by score (descending, then instance id) and assigns the
/// first ⌊n/2⌋ to Similar and the rest to Dissimilar.
pub fn split_by_similarity(
    dataset: &[EvalInstance],
    scores: &[SimilarityScore],
) -> Result<(Vec<EvalInstance>, Vec<EvalInstance>), SimilarityError> {
    let assignment = assign_subsets(dataset, scores)?;
    let (mut similar, mut dissimilar) = (Vec::new(), Vec::new());
    for (inst, (_, subset, _)) in dataset.iter().zip(assignment) {
        match subset {
            Subset::Similar => similar.push(inst.clone()),
            Subset::Dissimilar => dissimilar.push(inst.clone()),
        }
    }
    Ok((similar, dissimilar))
}

/// Per-instance (id, subset, score) in dataset order.
pub fn assign_subsets(
    dataset: &[EvalInstance],
    scores: &[SimilarityScore],
) -> Result<Vec<(String, Subset, f64)>, SimilarityError> {
    let by_id: HashMap<&str, f64> = scores.iter().map(|s| (s.instance_id.as_str(), s.score)).collect();
    let mut ranked = dataset
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            by_id
                .get(inst.instance_id.as_str())
                .map(|&s| (i, s))
                .ok_or_else(|| SimilarityError::MissingScore(inst.instance_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then_with(|| dataset[a.0].instance_id.cmp(&dataset[b.0].instance_id))
    });
    let half = dataset.len() / 2;
    let mut out: Vec<(String, Subset, f64)> = dataset
        .iter()
        .map(|inst| (inst.instance_id.clone(), Subset::Dissimilar, 0.0))
        .collect();
    for (rank, (i, score)) in ranked.into_iter().enumerate() {
        out[i].1 = if rank < half { Subset::Similar } else { Subset::Dissimilar };
        out[i].2 = score;
    }
    Ok(out)
}

/// CSV with columns instance_id, score, subset, in dataset order.
pub fn write_split_csv<W: Write>(out: &mut W, rows: &[(String, Subset, f64)]) -> std::io::Result<()> {
    writeln!(out, "instance_id,score,subset")?;
    for (id, subset, score) in rows {
        let id = if id.contains([',', '"', '\n']) { format!("\"{}\"", id.replace('"', "\"\"")) } else { id.clone() };
        writeln!(out, "{id},{score:.6},{}", subset.label())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RatingScale, ReviewRecord};
    use proptest::prelude::*;

    fn rec(desc: &str) -> ReviewRecord {
        ReviewRecord {
            user_id: "u".into(),
            item_id: desc.into(),
            item_description: desc.into(),
            review_text: "r".into(),
            rating: 5,
            timestamp: None,
        }
    }

    fn inst(id: &str, target: &str, ctx: &[&str]) -> EvalInstance {
        EvalInstance {
            instance_id: id.into(),
            context: ctx.iter().map(|c| rec(c)).collect(),
            target: rec(target),
            scale: RatingScale::default(),
            source_dataset: "t".into(),
        }
    }

    fn scored(ids: &[(&str, f64)]) -> (Vec<EvalInstance>, Vec<SimilarityScore>) {
        let data = ids.iter().map(|(id, _)| inst(id, "t", &["c"])).collect();
        let scores = ids.iter().map(|(id, s)| SimilarityScore { instance_id: id.to_string(), score: *s }).collect();
        (data, scores)
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, -3.0], &[-1.0, 3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(SimilarityError::ZeroNorm)));
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_and_max_pooling() {
        let emb: HashMap<String, Vec<f64>> = [
            ("t".to_string(), vec![1.0, 0.0]),
            ("a".to_string(), vec![0.2, (1.0f64 - 0.04).sqrt()]),
            ("b".to_string(), vec![0.8, 0.6]),
            ("same".to_string(), vec![3.0, 0.0]),
        ]
        .into();
        let i = inst("i", "t", &["a", "b"]);
        assert!((instance_similarity(&i, &emb, Pooling::Mean).unwrap().score - 0.5).abs() < 1e-12);
        assert!((instance_similarity(&i, &emb, Pooling::Max).unwrap().score - 0.8).abs() < 1e-12);
        let same = inst("j", "t", &["same", "same"]);
        assert!((instance_similarity(&same, &emb, Pooling::Mean).unwrap().score - 1.0).abs() < 1e-12);
        let missing = inst("k", "t", &["nope"]);
        assert!(matches!(
            instance_similarity(&missing, &emb, Pooling::Mean),
            Err(SimilarityError::MissingEmbedding(t)) if t == "nope"
        ));
    }

    #[test]
    fn split_examples() {
        let (data, scores) = scored(&[("d", 0.1), ("a", 0.9), ("c", 0.2), ("b", 0.8)]);
        let (sim, dis) = split_by_similarity(&data, &scores).unwrap();
        let ids = |v: &[EvalInstance]| v.iter().map(|i| i.instance_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&sim), ["a", "b"]);
        assert_eq!(ids(&dis), ["d", "c"]);

        let (data, scores) = scored(&[("a", 0.5), ("b", 0.4), ("c", 0.3), ("d", 0.2), ("e", 0.1)]);
        let (sim, dis) = split_by_similarity(&data, &scores).unwrap();
        assert_eq!((sim.len(), dis.len()), (2, 3));
        assert_eq!(dis[0].instance_id, "c");
    }

    #[test]
    fn ties_break_by_id() {
        let (data, scores) = scored(&[("b", 0.5), ("a", 0.5)]);
        let (sim, _) = split_by_similarity(&data, &scores).unwrap();
        assert_eq!(sim[0].instance_id, "a");
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_split_csv(&mut buf, &[("x:1".into(), Subset::Similar, 0.25)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "instance_id,score,subset\nx:1,0.250000,similar\n");
    }

    proptest! {
        #[test]
        fn split_is_a_partition(scores in prop::collection::vec(-1.0f64..1.0, 0..60)) {
            let ids: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, s)| (format!("i{i:03}"), *s)).collect();
            let refs: Vec<(&str, f64)> = ids.iter().map(|(a, b)| (a.as_str(), *b)).collect();
            let (data, sc) = scored(&refs);
            let (sim, dis) = split_by_similarity(&data, &sc).unwrap();
            prop_assert_eq!(sim.len() + dis.len(), data.len());
            prop_assert!(dis.len() == sim.len() || dis.len() == sim.len() + 1);
            let score = |i: &EvalInstance| sc.iter().find(|s| s.instance_id == i.instance_id).unwrap().score;
            let lo = sim.iter().map(score).fold(f64::INFINITY, f64::min);
            let hi = dis.iter().map(score).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(sim.is_empty() || dis.is_empty() || lo >= hi);
        }

        #[test]
        fn scaling_leaves_cosine_unchanged(
            a in prop::collection::vec(0.1f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            k in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
            prop_assume!(b.iter().any(|x| *x != 0.0));
            prop_assert!((cosine(&a, &b).unwrap() - cosine(&scaled, &b).unwrap()).abs() < 1e-12);
        }
    }
}
