use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::rng::SeedStream;

/// Compare reverse-mode gradients of a scalar objective against central
/// finite differences.
///
/// `f` builds the objective on a fresh tape from one leaf per entry of
/// `params`. The result is the maximum over every parameter entry of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let picks: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    check_entries(params, h, &picks, f)
}

/// [`grad_check`] over at most `per_param` seeded random entries of each
/// parameter, for models too large to perturb exhaustively.
pub fn grad_check_sampled<F>(params: &[Tensor], h: f64, per_param: usize, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut rng = SeedStream::new(seed).substream("gradcheck").rng();
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let mut idx = rand::seq::index::sample(&mut rng, p.len(), per_param.min(p.len())).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_entries(params, h, &picks, f)
}

fn check_entries<F>(params: &[Tensor], h: f64, picks: &[Vec<usize>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
    let dims: Vec<(usize, usize)> = params.iter().map(Tensor::as_matrix_dims).collect();

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars = bind(&mut g, &work, &dims, true)?;
        let root = f(&mut g, &vars)?;
        g.scalar(root)?;
        let grads = g.backward(root)?;
        vars.iter()
            .zip(&work)
            .map(|(&v, w)| grads.get(v).map_or_else(|| vec![0.0; w.len()], <[f64]>::to_vec))
            .collect()
    };

    let mut worst = 0.0_f64;
    for (p, pick) in picks.iter().enumerate() {
        for &i in pick {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let plus = eval(&work, &dims, &f)?;
            work[p][i] = orig - h;
            let minus = eval(&work, &dims, &f)?;
            work[p][i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[p][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn bind<'a>(g: &mut Graph<'a>, work: &'a [Vec<f64>], dims: &[(usize, usize)], grad: bool) -> Result<Vec<Var>> {
    work.iter()
        .zip(dims)
        .map(|(w, &(r, c))| g.borrowed(r, c, w, grad))
        .collect()
}

fn eval<F>(work: &[Vec<f64>], dims: &[(usize, usize)], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars = bind(&mut g, work, dims, false)?;
    let root = f(&mut g, &vars)?;
    g.scalar(root)
}
