//! Central finite-difference checks of tape gradients, reported per
//! parameter group.

use std::collections::BTreeMap;

use crate::autodiff::{ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: String,
    /// Number of scalar coordinates compared.
    pub checked: usize,
    /// `|a - n| / max(|a|, |n|)` over the compared coordinates, as vectors.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

/// Compares analytic gradients of `loss` with central differences of step
/// `step`. For each parameter at most `max_coords` coordinates are checked:
/// the largest analytic entries plus an evenly spaced sample.
pub fn check_gradients<F>(
    store: &ParamStore,
    step: f64,
    max_coords: usize,
    loss: F,
) -> Vec<GroupReport>
where
    F: Fn(&mut Tape) -> Var,
{
    let grads = {
        let mut tape = Tape::new(store);
        let out = loss(&mut tape);
        tape.backward(out)
    };
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let out = loss(&mut tape);
        tape.scalar_value(out)
    };

    let mut work = store.clone();
    let mut per_group: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (id, g) in grads.iter() {
        let coords = pick_coords(g, max_coords);
        let group = store.get(id).group.clone();
        let entry = per_group.entry(group).or_default();
        for k in coords {
            let orig = work.get(id).data[k];
            work.get_mut(id).data[k] = orig + step;
            let up = eval(&work);
            work.get_mut(id).data[k] = orig - step;
            let down = eval(&work);
            work.get_mut(id).data[k] = orig;
            entry.0.push(g[k]);
            entry.1.push((up - down) / (2.0 * step));
        }
    }

    per_group
        .into_iter()
        .map(|(group, (a, n))| {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
            let denom = norm(&a).max(norm(&n)).max(1e-12);
            GroupReport {
                checked: a.len(),
                rel_error: norm(&diff) / denom,
                max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
                analytic_norm: norm(&a),
                group,
            }
        })
        .collect()
}

fn pick_coords(g: &[f64], max_coords: usize) -> Vec<usize> {
    if g.len() <= max_coords {
        return (0..g.len()).collect();
    }
    let mut by_size: Vec<usize> = (0..g.len()).collect();
    by_size.sort_by(|a, b| g[*b].abs().total_cmp(&g[*a].abs()).then(a.cmp(b)));
    let mut coords: Vec<usize> = by_size[..max_coords / 2].to_vec();
    let stride = g.len() / (max_coords - max_coords / 2).max(1);
    coords.extend((0..g.len()).step_by(stride.max(1)).take(max_coords - max_coords / 2));
    coords.sort_unstable();
    coords.dedup();
    coords
}
