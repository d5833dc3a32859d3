use crate::encoders::BBox;
use crate::error::{invalid, Result};
use crate::numcore::{Graph, Var};

/// Token cells whose centre lies inside any box, row-major over a
/// `grid x grid` token grid.
pub fn region_mask<'b>(boxes: impl IntoIterator<Item = &'b BBox>, grid: usize) -> Vec<bool> {
    let mut mask = vec![false; grid * grid];
    for b in boxes {
        for i in 0..grid {
            for j in 0..grid {
                let (x, y) = ((j as f64 + 0.5) / grid as f64, (i as f64 + 0.5) / grid as f64);
                if b.contains(x, y) {
                    mask[i * grid + j] = true;
                }
            }
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub layout: f64,
    pub region: f64,
    pub total: f64,
}

/// Plain-number losses over `[tokens, width]` row-major noise arrays.
pub fn losses(eps: &[f64], eps_hat: &[f64], mask: &[bool], lambda: f64) -> Result<Losses> {
    if eps.len() != eps_hat.len() || mask.is_empty() || !eps.len().is_multiple_of(mask.len()) {
        return Err(invalid("losses: inconsistent shapes"));
    }
    let width = eps.len() / mask.len();
    let sq: Vec<f64> = eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).collect();
    let layout = sq.iter().sum::<f64>() / sq.len() as f64;
    let (mut rs, mut rn) = (0.0, 0usize);
    for (tok, &m) in mask.iter().enumerate() {
        if m {
            rs += sq[tok * width..(tok + 1) * width].iter().sum::<f64>();
            rn += width;
        }
    }
    let region = if rn == 0 { 0.0 } else { rs / rn as f64 };
    Ok(Losses {
        layout,
        region,
        total: layout + lambda * region,
    })
}

/// Loss nodes on a tape: `(L′, L_layout, L_region)`, with `L_region`
/// absent for an empty mask.
pub fn loss_graph(
    g: &mut Graph<'_>,
    eps_hat: Var,
    target: Var,
    mask: &[bool],
    lambda: f64,
) -> Result<(Var, Var, Option<Var>)> {
    let diff = g.sub(eps_hat, target)?;
    let sq = g.mul(diff, diff)?;
    let layout = g.mean_all(sq)?;
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() || lambda == 0.0 {
        let region = if rows.is_empty() {
            None
        } else {
            let r = g.gather_rows(sq, &rows)?;
            Some(g.mean_all(r)?)
        };
        return Ok((layout, layout, region));
    }
    let r = g.gather_rows(sq, &rows)?;
    let region = g.mean_all(r)?;
    let weighted = g.scale(region, lambda)?;
    let total = g.add(layout, weighted)?;
    Ok((total, layout, Some(region)))
}
