//! Naive quadratic-time metric oracles and a random instance generator.

use proptest::prelude::*;

/// Position of item `i` in a descending order with ties broken by index.
pub fn rank_of(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

pub fn oracle_ap(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| relevant[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &pos {
        let r = rank_of(scores, i);
        let above = pos.iter().filter(|&&j| rank_of(scores, j) <= r).count();
        total += above as f64 / r as f64;
    }
    Some(total / pos.len() as f64)
}

pub fn oracle_map(scores: &[Vec<f64>], ann: &[Vec<usize>], cand: &[usize]) -> Option<f64> {
    let aps: Vec<f64> = cand
        .iter()
        .filter_map(|&l| {
            let col: Vec<f64> = scores.iter().map(|r| r[l]).collect();
            let rel: Vec<bool> = ann.iter().map(|a| a.contains(&l)).collect();
            oracle_ap(&col, &rel)
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn oracle_topk(scores: &[Vec<f64>], ann: &[Vec<usize>], k: usize, cand: &[usize]) -> Option<(f64, f64, f64)> {
    let (mut hits, mut images, mut positives) = (0, 0, 0);
    for (row, a) in scores.iter().zip(ann) {
        let n_pos = cand.iter().filter(|l| a.contains(l)).count();
        if n_pos == 0 {
            continue;
        }
        images += 1;
        positives += n_pos;
        let sub: Vec<f64> = cand.iter().map(|&l| row[l]).collect();
        for (j, &l) in cand.iter().enumerate() {
            if rank_of(&sub, j) <= k && a.contains(&l) {
                hits += 1;
            }
        }
    }
    if images == 0 {
        return None;
    }
    let p = hits as f64 / (k * images) as f64;
    let r = hits as f64 / positives as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Some((p, r, f))
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub scores: Vec<Vec<f64>>,
    pub ann: Vec<Vec<usize>>,
    pub cand: Vec<usize>,
    pub k: usize,
}

/// Up to 20 images by 10 labels; scores on a coarse grid so ties are common.
pub fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=20, 1usize..=10).prop_flat_map(|(n, l)| {
        (
            prop::collection::vec(prop::collection::vec(0u8..6, l), n),
            prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.3), l), n),
            prop::collection::vec(any::<bool>(), l),
            1usize..=l,
        )
            .prop_map(move |(s, a, c, k)| {
                let mut cand: Vec<usize> = (0..l).filter(|&i| c[i]).collect();
                if cand.is_empty() {
                    cand.push(l - 1);
                }
                let k = k.min(cand.len());
                Instance {
                    scores: s.iter().map(|r| r.iter().map(|&v| v as f64 * 0.25 - 0.5).collect()).collect(),
                    ann: a.iter().map(|r| (0..l).filter(|&i| r[i]).collect()).collect(),
                    cand,
                    k,
                }
            })
    })
}

