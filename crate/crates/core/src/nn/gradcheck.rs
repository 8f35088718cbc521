use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, ParamStore, Tape, Var};

/// Which coordinates of each trainable parameter to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// Up to `per_param` coordinates per parameter, drawn with `seed`.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over probed coordinates.
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64, NnError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NnError>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares tape gradients of the scalar built by `f` against central differences.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, coords: Coords, f: F) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NnError>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let mut rng = match coords {
        Coords::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coords::All => None,
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let picks: Vec<usize> = match (coords, rng.as_mut()) {
            (Coords::Sample { per_param, .. }, Some(r)) if per_param < n => {
                let mut v = sample(r, n, per_param).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in picks {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + h;
            let up = eval(store, &f);
            store.get_mut(id).value.data_mut()[i] = original - h;
            let down = eval(store, &f);
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (up? - down?) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
