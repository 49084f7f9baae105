use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// True when `a` is no worse than `b` in every objective and strictly better
/// in at least one.
pub fn dominates(a: &[f64], b: &[f64], dirs: &[Direction]) -> bool {
    let mut strictly = false;
    for ((&x, &y), d) in a.iter().zip(b).zip(dirs) {
        let (better, worse) = match d {
            Direction::Maximize => (x > y, x < y),
            Direction::Minimize => (x < y, x > y),
        };
        if worse {
            return false;
        }
        strictly |= better;
    }
    strictly
}

/// Partitions `points` into fronts of indices: the first front is the
/// non-dominated set, the next is non-dominated once the first is removed,
/// and so on. Indices within a front ascend.
pub fn non_dominated_sort(points: &[Vec<f64>], dirs: &[Direction]) -> Result<Vec<Vec<usize>>> {
    if let Some(p) = points.iter().find(|p| p.len() != dirs.len()) {
        return Err(Error::Contract(format!(
            "objective vector of arity {} with {} directions",
            p.len(),
            dirs.len()
        )));
    }
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&points[i], &points[j], dirs) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(&points[j], &points[i], dirs) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    Ok(fronts)
}

/// Rank (1-based front number) of every point.
pub fn ranks(fronts: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut r = vec![0; n];
    for (k, f) in fronts.iter().enumerate() {
        for &i in f {
            r[i] = k + 1;
        }
    }
    r
}

/// Crowding distance of each member of one front. Per objective the
/// members are sorted, the two extremes get infinity and every interior
/// member adds the gap between its neighbours divided by the objective's
/// range. Objectives with zero range add nothing.
pub fn crowding_distance(front: &[Vec<f64>]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let arity = front[0].len();
    let mut dist = vec![0.0; n];
    for obj in 0..arity {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a][obj].total_cmp(&front[b][obj]).then(a.cmp(&b)));
        let lo = front[order[0]][obj];
        let hi = front[order[n - 1]][obj];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in order.windows(3) {
            dist[w[1]] += (front[w[2]][obj] - front[w[0]][obj]) / range;
        }
    }
    dist
}

/// Crowded-comparison order: lower rank first, then larger crowding.
pub fn crowded_cmp(rank_a: usize, crowd_a: f64, rank_b: usize, crowd_b: f64) -> Ordering {
    rank_a.cmp(&rank_b).then(crowd_b.total_cmp(&crowd_a))
}

/// Rank and crowding distance of every point, crowding measured within
/// each point's own front.
pub fn rank_and_crowd(points: &[Vec<f64>], dirs: &[Direction]) -> Result<(Vec<usize>, Vec<f64>)> {
    let fronts = non_dominated_sort(points, dirs)?;
    let r = ranks(&fronts, points.len());
    let mut crowd = vec![0.0; points.len()];
    for f in &fronts {
        let pts: Vec<Vec<f64>> = f.iter().map(|&i| points[i].clone()).collect();
        for (&i, d) in f.iter().zip(crowding_distance(&pts)) {
            crowd[i] = d;
        }
    }
    Ok((r, crowd))
}
