use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{render_visibility, GaussianSet, RasterConfig};
use crate::scene::{Camera, Intrinsics, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCamera {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub camera: Camera,
}

/// `azimuths` cameras evenly spaced on the horizon plus one overhead camera.
pub fn view_ring(
    azimuths: usize,
    overhead_elevation_deg: f64,
    radius: f64,
    target: Vec3,
    intrinsics: Intrinsics,
) -> Result<Vec<ViewCamera>> {
    let mut out = Vec::with_capacity(azimuths + 1);
    let mut push = |az: f64, el: f64| -> Result<()> {
        out.push(ViewCamera {
            azimuth_deg: az,
            elevation_deg: el,
            radius,
            camera: Camera::look_at(az, el, radius, target, intrinsics)?,
        });
        Ok(())
    };
    for k in 0..azimuths {
        push(360.0 * k as f64 / azimuths as f64, 0.0)?;
    }
    push(0.0, overhead_elevation_deg)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSelection {
    /// Indices into the camera list, ascending.
    pub unseen: Vec<usize>,
    /// `|visible| / |foreground|` per camera; `None` for an empty foreground.
    pub visibility: Vec<Option<f64>>,
}

/// Marks a camera unseen when its visibility ratio is at most `threshold`.
/// `canonical` carries the visibility flags; cameras seeing no foreground are skipped.
pub fn select_views(
    canonical: &GaussianSet,
    cameras: &[ViewCamera],
    threshold: f64,
    raster: &RasterConfig,
) -> Result<ViewSelection> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation(format!("visibility threshold must lie in (0, 1), got {threshold}")));
    }
    let mut unseen = Vec::new();
    let mut visibility = Vec::with_capacity(cameras.len());
    for (i, v) in cameras.iter().enumerate() {
        let ratio = render_visibility(canonical, &v.camera, raster)?.ratio();
        match ratio {
            None => log::warn!(
                "camera at azimuth {} elevation {} sees no foreground, skipped",
                v.azimuth_deg,
                v.elevation_deg
            ),
            Some(r) if r <= threshold => unseen.push(i),
            Some(_) => {}
        }
        visibility.push(ratio);
    }
    Ok(ViewSelection { unseen, visibility })
}
