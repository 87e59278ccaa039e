//! Coarse metric depth and guide normals from a rectified image pair.

pub mod guide;
pub mod sgm;

pub use guide::{
    depth_to_disparity, disparity_to_depth, fill_and_smooth, guide_normals, inpaint, mean_normal_angle, FillConfig, GuideDepth,
};
pub use sgm::{remove_speckles, sgm_disparity, SgmConfig};
