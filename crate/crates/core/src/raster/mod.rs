//! CPU Gaussian splatting: EWA projection, tile-binned front-to-back
//! compositing with an analytic reverse pass, and first-hit visibility.

mod gaussians;
mod project;
mod render;
mod visibility;

pub use gaussians::{GaussianSet, ParamGrads};
pub use project::{covariance3d, project_backward, project_gaussian, quat_to_mat, Splat2D, NEAR_PLANE};
pub use render::{
    attribute_values, composite, composite_backward, prepare, render, render_backward, render_backward_multi,
    Attribute, Prepared, RasterConfig, RenderOutput, ScreenGrads,
};
pub use visibility::{
    mark_visibility, mark_visibility_supersampled, render_visibility, VisibilityRender, FOREGROUND_THRESHOLD, HIT_THRESHOLD, VISIBLE_THRESHOLD,
};
