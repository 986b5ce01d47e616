//! Image quality metrics and resampling.

pub mod image;
pub mod quality;
pub mod resize;

pub use image::ImageU8;
pub use quality::{format_psnr, psnr_plane, psnr_y, psnr_y_tensor, rgb_to_y, ssim_y, PSNR_CAP_DB};
pub use resize::{bicubic_resize, Scale};
