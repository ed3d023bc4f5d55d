use super::uvmap::PositionalUvMap;
use crate::error::{Error, Result};
use crate::raster::GaussianSet;
use crate::scene::{Vec3, WeightMatrix};

/// Mean distance from each valid texel to its valid 4-neighbours; texels
/// without valid neighbours get the median over the rest.
pub fn texel_spacing(map: &PositionalUvMap) -> Vec<f64> {
    let mut out = vec![f64::NAN; map.valid.len()];
    for j in 0..map.height {
        for i in 0..map.width {
            let t = map.texel(i, j);
            if !map.valid[t] {
                continue;
            }
            let mut sum = 0.0;
            let mut n = 0;
            let nbrs = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            for (a, b) in nbrs {
                if a < map.width && b < map.height && map.valid[map.texel(a, b)] {
                    sum += (map.positions[map.texel(a, b)] - map.positions[t]).norm();
                    n += 1;
                }
            }
            if n > 0 {
                out[t] = sum / n as f64;
            }
        }
    }
    let mut known: Vec<f64> = out.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    known.sort_by(f64::total_cmp);
    let median = known.get(known.len() / 2).copied().unwrap_or(1e-3);
    for (t, v) in out.iter_mut().enumerate() {
        if map.valid[t] && !(v.is_finite() && *v > 0.0) {
            *v = median;
        }
    }
    out
}

/// One Gaussian per valid texel of a rest-pose map: gray, opaque, identity
/// rotation, isotropic scale of half the local texel spacing.
pub fn init_gaussians_from_uv(rest: &PositionalUvMap) -> Result<GaussianSet> {
    let weights = rest
        .weights
        .as_ref()
        .ok_or_else(|| Error::validation("positional map carries no blend weights"))?;
    if rest.normals.len() != rest.valid.len() {
        return Err(Error::validation("positional map carries no normals"));
    }
    let texels = rest.valid_texels();
    if texels.is_empty() {
        return Err(Error::validation("positional map has no valid texels"));
    }
    let spacing = texel_spacing(rest);
    let mut set = GaussianSet::empty(weights.cols());
    set.blend_weights = WeightMatrix::zeros(0, weights.cols());
    for &[i, j] in &texels {
        let t = rest.texel(i as usize, j as usize);
        let s = 0.5 * spacing[t];
        set.centers.push(rest.positions[t]);
        set.colors.push(Vec3::new(0.5, 0.5, 0.5));
        set.opacities.push(1.0);
        set.rotations.push([1.0, 0.0, 0.0, 0.0]);
        set.scales.push(Vec3::new(s, s, s));
        set.normals.push(rest.normals[t]);
        set.blend_weights.push_row(weights.row(t));
        set.visibility.push(false);
        set.uv_texel.push([i, j]);
    }
    Ok(set)
}
