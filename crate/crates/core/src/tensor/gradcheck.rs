use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Result, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub coords_checked: usize,
}

/// Compare tape gradients with central differences.
///
/// `f` must build a scalar on a fresh tape from the given store. When
/// `max_coords` is `Some(n)`, a seeded random subset of at most `n`
/// coordinates is checked; otherwise every coordinate is. Relative error
/// is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore<f64>,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let grads = tape.backward(out)?;

    let coords: Vec<(usize, usize)> = params
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |k| (id.0, k)))
        .collect();
    let chosen: Vec<(usize, usize)> = match max_coords {
        Some(n) if n < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, coords.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, store)?;
        Ok(t.scalar(o))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        coords_checked: chosen.len(),
    };
    for (pi, k) in chosen {
        let id = super::ParamId(pi);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
        let orig = work.value(id).data()[k];
        work.get_mut(id).value.data_mut()[k] = orig + eps;
        let plus = eval(&work)?;
        work.get_mut(id).value.data_mut()[k] = orig - eps;
        let minus = eval(&work)?;
        work.get_mut(id).value.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((params.get(id).name.clone(), k));
            report.worst_values = Some((analytic, numeric));
        }
    }
    Ok(report)
}
