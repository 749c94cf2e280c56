use log::warn;

use super::SweepRow;

/// Indices of points not dominated in (latency, energy), in input order.
/// A point is dominated when another is no worse on both axes and strictly
/// better on one; exact duplicates do not dominate each other.
pub fn nondominated_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(points[a].1.total_cmp(&points[b].1)));
    let mut keep = vec![false; points.len()];
    // Lowest energy among strictly smaller latencies.
    let mut best_before = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let lat = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == lat {
            j += 1;
        }
        let group_min = points[order[i]].1;
        for &k in &order[i..j] {
            let e = points[k].1;
            if e == group_min && e < best_before {
                keep[k] = true;
            }
        }
        best_before = best_before.min(group_min);
        i = j;
    }
    (0..points.len()).filter(|&k| keep[k]).collect()
}

/// SLA-feasible rows not dominated in (tail latency, energy). Rows that
/// violate the SLA or failed to run are dropped before the dominance test.
pub fn pareto_frontier(rows: &[SweepRow]) -> Vec<SweepRow> {
    let feasible: Vec<&SweepRow> = rows.iter().filter(|r| r.sla_ok && r.measurement.is_some()).collect();
    if feasible.is_empty() {
        if !rows.is_empty() {
            warn!("every swept config violates the SLA; Pareto frontier is empty");
        }
        return Vec::new();
    }
    let pts: Vec<(f64, f64)> = feasible
        .iter()
        .map(|r| {
            let m = r.measurement.as_ref().expect("filtered");
            (m.tail_latency_us, m.energy_joules)
        })
        .collect();
    nondominated_indices(&pts).into_iter().map(|i| feasible[i].clone()).collect()
}
