//! Cross-modal retrieval metrics over packed hash codes.
//!
//! Two protocol families:
//!
//! * **Hamming ranking** — sort the database by distance to the query
//!   (ties broken by ascending database index) and score the ranking
//!   with average precision (full-radius or @N prefixes) and
//!   TopN-precision curves. Queries with no relevant item contribute
//!   AP = 0 and stay in the mean.
//! * **Hash lookup** — for each radius `r` in `0..=c`, return all items
//!   within distance `r`; precision skips queries whose return set is
//!   empty at that radius, recall skips queries with no relevant items.
//!
//! Distances are popcounts over packed codes, identical to
//! `¼‖h_i − h_j‖²` on ±1 vectors.

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::CodeSet;
use crate::data::RelevanceOracle;
use crate::error::{DmhError, Result};

/// Hamming distance between two ±1 vectors, computed by packing both
/// into bit vectors and popcounting the XOR.
pub fn hamming_distance(h1: ArrayView1<f64>, h2: ArrayView1<f64>) -> Result<u32> {
    if h1.len() != h2.len() {
        return Err(DmhError::shape(
            format!("{}", h1.len()),
            format!("{}", h2.len()),
            "hamming_distance inputs",
        ));
    }
    let row = |v: ArrayView1<f64>| {
        let m = v.insert_axis(ndarray::Axis(0)).to_owned();
        CodeSet::from_signs(&m)
    };
    let a = row(h1)?;
    let b = row(h2)?;
    Ok(a.hamming(0, &b, 0))
}

fn check_same_c(query: &CodeSet, db: &CodeSet) -> Result<()> {
    if query.c() != db.c() {
        return Err(DmhError::shape(
            format!("{} bits", query.c()),
            format!("{} bits", db.c()),
            "query and database codes",
        ));
    }
    Ok(())
}

/// Database indices sorted by ascending Hamming distance to query row
/// `qi`; ties broken by ascending database index (counting sort).
pub fn rank_by_hamming(query: &CodeSet, qi: usize, db: &CodeSet) -> Result<Vec<usize>> {
    check_same_c(query, db)?;
    let c = db.c();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); c + 1];
    for j in 0..db.n() {
        buckets[query.hamming(qi, db, j) as usize].push(j);
    }
    Ok(buckets.into_iter().flatten().collect())
}

/// Average precision of a ranking against boolean relevance, over the
/// top-`radius` prefix (`None` = the whole ranking). `R'` = number of
/// relevant items inside the prefix; zero relevant items → 0.
pub fn average_precision(ranking: &[usize], relevant: &[bool], radius: Option<usize>) -> f64 {
    let prefix = radius.unwrap_or(ranking.len()).min(ranking.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &idx) in ranking[..prefix].iter().enumerate() {
        if relevant[idx] {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

fn relevance_row(oracle: &RelevanceOracle, q: usize) -> Vec<bool> {
    (0..oracle.n_db()).map(|d| oracle.relevant(q, d)).collect()
}

fn check_oracle(query: &CodeSet, db: &CodeSet, oracle: &RelevanceOracle) -> Result<()> {
    check_same_c(query, db)?;
    if oracle.n_queries() != query.n() || oracle.n_db() != db.n() {
        return Err(DmhError::shape(
            format!("oracle over {}x{}", query.n(), db.n()),
            format!("oracle over {}x{}", oracle.n_queries(), oracle.n_db()),
            "relevance oracle alignment",
        ));
    }
    Ok(())
}

/// Mean average precision over all queries (zero-relevant queries count
/// as 0). `radius = None` uses the full database as retrieval radius.
pub fn mean_average_precision(
    query: &CodeSet,
    db: &CodeSet,
    oracle: &RelevanceOracle,
    radius: Option<usize>,
) -> Result<f64> {
    check_oracle(query, db, oracle)?;
    if query.n() == 0 {
        return Err(DmhError::Data("MAP over an empty query set".into()));
    }
    let total: f64 = (0..query.n())
        .into_par_iter()
        .map(|q| {
            let ranking = rank_by_hamming(query, q, db).expect("c checked");
            average_precision(&ranking, &relevance_row(oracle, q), radius)
        })
        .sum();
    Ok(total / query.n() as f64)
}

/// Precision@N averaged over queries, at `n_points` evenly spaced
/// prefix sizes ending at the database size.
pub fn topn_precision_curve(
    query: &CodeSet,
    db: &CodeSet,
    oracle: &RelevanceOracle,
    n_points: usize,
) -> Result<Vec<(usize, f64)>> {
    check_oracle(query, db, oracle)?;
    if n_points == 0 || n_points > db.n() {
        return Err(DmhError::Config(format!(
            "n_points must be in 1..={}, got {n_points}",
            db.n()
        )));
    }
    let ns: Vec<usize> = (1..=n_points).map(|i| (i * db.n() / n_points).max(1)).collect();
    let per_query: Vec<Vec<f64>> = (0..query.n())
        .into_par_iter()
        .map(|q| {
            let ranking = rank_by_hamming(query, q, db).expect("c checked");
            let rel = relevance_row(oracle, q);
            let mut cum = 0usize;
            let mut hits_at = vec![0usize; db.n() + 1];
            for (pos, &idx) in ranking.iter().enumerate() {
                if rel[idx] {
                    cum += 1;
                }
                hits_at[pos + 1] = cum;
            }
            ns.iter().map(|&n| hits_at[n] as f64 / n as f64).collect()
        })
        .collect();
    Ok(ns
        .iter()
        .enumerate()
        .map(|(pi, &n)| {
            let mean = per_query.iter().map(|p| p[pi]).sum::<f64>() / query.n().max(1) as f64;
            (n, mean)
        })
        .collect())
}

/// One hash-lookup operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub radius: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Hash-lookup precision/recall for every radius `0..=c`.
///
/// Precision at a radius averages over queries that return at least one
/// item there; recall averages over queries with at least one relevant
/// item. A radius where no query contributes (or no query has relevant
/// items) reports 0 for that component.
pub fn pr_curve_hash_lookup(query: &CodeSet, db: &CodeSet, oracle: &RelevanceOracle) -> Result<Vec<PrPoint>> {
    check_oracle(query, db, oracle)?;
    let c = db.c();
    // Per query: histogram of (returned, relevant-returned) by distance.
    let histograms: Vec<(Vec<usize>, Vec<usize>, usize)> = (0..query.n())
        .into_par_iter()
        .map(|q| {
            let mut ret = vec![0usize; c + 1];
            let mut rel_ret = vec![0usize; c + 1];
            let mut total_rel = 0usize;
            for j in 0..db.n() {
                let d = query.hamming(q, db, j) as usize;
                ret[d] += 1;
                if oracle.relevant(q, j) {
                    rel_ret[d] += 1;
                    total_rel += 1;
                }
            }
            (ret, rel_ret, total_rel)
        })
        .collect();

    let mut curve = Vec::with_capacity(c + 1);
    let mut cum_ret = vec![0usize; query.n()];
    let mut cum_rel = vec![0usize; query.n()];
    for r in 0..=c {
        let mut prec_sum = 0.0;
        let mut prec_n = 0usize;
        let mut rec_sum = 0.0;
        let mut rec_n = 0usize;
        for (q, (ret, rel_ret, total_rel)) in histograms.iter().enumerate() {
            cum_ret[q] += ret[r];
            cum_rel[q] += rel_ret[r];
            if cum_ret[q] > 0 {
                prec_sum += cum_rel[q] as f64 / cum_ret[q] as f64;
                prec_n += 1;
            }
            if *total_rel > 0 {
                rec_sum += cum_rel[q] as f64 / *total_rel as f64;
                rec_n += 1;
            }
        }
        curve.push(PrPoint {
            radius: r,
            precision: if prec_n > 0 { prec_sum / prec_n as f64 } else { 0.0 },
            recall: if rec_n > 0 { rec_sum / rec_n as f64 } else { 0.0 },
        });
    }
    Ok(curve)
}

/// Retrieval direction: which modality queries which.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Modality-1 queries against a modality-2 database (image→text in
    /// the canonical setting).
    #[serde(rename = "m1_to_m2")]
    M1ToM2,
    /// Modality-2 queries against a modality-1 database.
    #[serde(rename = "m2_to_m1")]
    M2ToM1,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::M1ToM2 => write!(f, "m1->m2"),
            Direction::M2ToM1 => write!(f, "m2->m1"),
        }
    }
}

/// Full evaluation of one retrieval direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub c: usize,
    pub map_full: f64,
    /// MAP at fixed prefix sizes.
    pub map_at: Vec<(usize, f64)>,
    /// (N, precision@N) at evenly spaced N.
    pub topn_curve: Vec<(usize, f64)>,
    /// Hash-lookup operating points for radius 0..=c.
    pub pr_curve: Vec<PrPoint>,
}

impl RetrievalReport {
    /// CSV for the TopN-precision curve (`N,precision`).
    pub fn topn_csv(&self) -> String {
        let mut s = String::from("N,precision\n");
        for (n, p) in &self.topn_curve {
            s.push_str(&format!("{n},{p}\n"));
        }
        s
    }

    /// CSV for the hash-lookup curve (`radius,precision,recall`).
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("radius,precision,recall\n");
        for p in &self.pr_curve {
            s.push_str(&format!("{},{},{}\n", p.radius, p.precision, p.recall));
        }
        s
    }
}

/// Evaluate one direction: MAP (full and @N), TopN-precision, and the
/// hash-lookup PR curve.
pub fn evaluate_direction(
    direction: Direction,
    query: &CodeSet,
    db: &CodeSet,
    oracle: &RelevanceOracle,
    map_at_ns: &[usize],
    topn_points: usize,
) -> Result<RetrievalReport> {
    let map_full = mean_average_precision(query, db, oracle, None)?;
    let mut map_at = Vec::with_capacity(map_at_ns.len());
    for &n in map_at_ns {
        map_at.push((n, mean_average_precision(query, db, oracle, Some(n))?));
    }
    let topn_curve = topn_precision_curve(query, db, oracle, topn_points.min(db.n()))?;
    let pr_curve = pr_curve_hash_lookup(query, db, oracle)?;
    Ok(RetrievalReport {
        direction,
        c: db.c(),
        map_full,
        map_at,
        topn_curve,
        pr_curve,
    })
}
