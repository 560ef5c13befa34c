use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Scalar, Tape, Tensor, Var};

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Coordinates checked per parameter tensor; all of them when the tensor
    /// is smaller.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coords_per_param: 24,
            seed: 0,
        }
    }
}

/// Compares tape gradients against central differences.
///
/// `f` rebuilds the scalar loss on a fresh tape from leaves bound to
/// `params` (in order). Returns the maximum over sampled coordinates of
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<S, F>(
    f: F,
    params: &[Tensor<S>],
    eps: S,
    opts: &GradCheckOptions,
) -> Result<S, NumericsError>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var, NumericsError>,
{
    if eps <= S::zero() {
        return Err(NumericsError::Contract(
            "grad_check eps must be positive".into(),
        ));
    }
    let mut params: Vec<Tensor<S>> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.set_requires_grad(true);
            p
        })
        .collect();

    let eval = |params: &[Tensor<S>],
                with_grad: bool|
     -> Result<(S, Option<Vec<Vec<S>>>), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss)[0];
        if !with_grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let per_param = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| {
                grads
                    .get(v)
                    .map_or_else(|| vec![S::zero(); p.len()], <[S]>::to_vec)
            })
            .collect();
        Ok((value, Some(per_param)))
    };

    let (_, analytic) = eval(&params, true)?;
    let analytic = analytic.expect("requested gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let floor = S::lit(1e-8);
    let two = S::lit(2.0);
    let mut worst = S::zero();
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_param).into_vec()
        };
        for c in coords {
            let orig = params[pi].data()[c];
            params[pi].data_mut()[c] = orig + eps;
            let (up, _) = eval(&params, false)?;
            params[pi].data_mut()[c] = orig - eps;
            let (down, _) = eval(&params, false)?;
            params[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (two * eps);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / floor.max(a.abs() + numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
