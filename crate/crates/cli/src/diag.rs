//! Per-view diagnostic maps: rendered index, SSIM, over-large and hard
//! Gaussian projections, and view-space gradient norms.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use hgs_core::backward::backward_view;
use hgs_core::densify::{hard_in_view, over_large, projected_pixel};
use hgs_core::img::Image;
use hgs_core::loss::{combined_loss, ssim_map, SsimMap};
use hgs_core::render::{render_view, RenderOutput};

use crate::config::TrainArgs;
use crate::{load_cloud, load_scene, view_index};

#[derive(Debug, Clone, Args)]
pub struct DiagArgs {
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub view: u32,
    /// Output directory.
    #[arg(long, default_value = "runs/diag")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

/// A Gaussian marked on an overlay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkedPoint {
    pub gaussian: usize,
    pub x: usize,
    pub y: usize,
    pub pixel_count: u32,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct DiagBundle {
    pub render: RenderOutput,
    pub ssim: SsimMap,
    pub over_large: Vec<MarkedPoint>,
    pub hard: Vec<MarkedPoint>,
}

/// Color of a rendered index; empty pixels (-1) are black.
pub fn index_color(index: i64) -> [u8; 3] {
    if index < 0 {
        return [0, 0, 0];
    }
    let mut h = (index as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    // Keep channels away from black so real indices never read as empty.
    let c = |s: u32| 48 + ((h >> s) & 0xff) as u8 % 208;
    [c(0), c(8), c(16)]
}

fn points(render: &RenderOutput, ssim: &SsimMap, mask: &[bool]) -> Vec<MarkedPoint> {
    let splat_of = render.splat_of();
    mask.iter()
        .enumerate()
        .filter(|&(_, &m)| m)
        .filter_map(|(i, _)| {
            let s = splat_of[i]?;
            let (x, y) = projected_pixel(&render.splats[s].mean2d, render.width(), render.height())?;
            Some(MarkedPoint {
                gaussian: i,
                x,
                y,
                pixel_count: render.pixel_counts[i],
                ssim: ssim.at(x, y),
            })
        })
        .collect()
}

fn overlay(gt: &Image, pts: &[MarkedPoint], color: [u8; 3]) -> image::RgbImage {
    let mut img = gt.to_rgb8();
    for p in img.pixels_mut() {
        p.0 = p.0.map(|v| (v as f64 * 0.35) as u8);
    }
    for p in pts {
        img.put_pixel(p.x as u32, p.y as u32, image::Rgb(color));
    }
    img
}

fn points_csv(pts: &[MarkedPoint]) -> String {
    let mut out = String::from("gaussian,x,y,pixel_count,ssim\n");
    for p in pts {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6}",
            p.gaussian, p.x, p.y, p.pixel_count, p.ssim
        );
    }
    out
}

pub fn cmd_diag(a: &DiagArgs) -> Result<DiagBundle> {
    let cfg = a.train.resolve()?;
    let scene = load_scene(&a.scene)?;
    let cloud = load_cloud(&a.checkpoint)?;
    let v = view_index(&scene, a.view)?;
    let (cam, gt) = (&scene.cameras[v], &scene.gt_images[v]);
    let render = render_view(&cloud, cam, &scene.background)?;
    let ssim = ssim_map(&render.image, gt)?;
    let (_, d_image) = combined_loss(&render.image, gt, cfg.train.lambda_ssim)?;
    let grads = backward_view(&cloud, cam, &render, &d_image)?;
    let policy = &cfg.train.policy;
    let over = points(&render, &ssim, &over_large(&render, policy));
    let hard = points(&render, &ssim, &hard_in_view(&render, &ssim, policy));

    let out = &a.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (w, h) = (render.width() as u32, render.height() as u32);
    let index_img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb(index_color(render.rendered_index[(y * w + x) as usize]))
    });
    let save = |img: &dyn Fn(&std::path::Path) -> image::ImageResult<()>, name: &str| {
        let p = out.join(name);
        img(&p).with_context(|| format!("writing {}", p.display()))
    };
    save(&|p| index_img.save(p), "rendered_index.png")?;
    let raw: Vec<u8> = render
        .rendered_index
        .iter()
        .flat_map(|&i| (i as i32).to_le_bytes())
        .collect();
    fs::write(out.join("rendered_index.i32"), raw)?;
    save(&|p| ssim.to_gray8().save(p), "ssim.png")?;
    save(&|p| overlay(gt, &over, [255, 64, 64]).save(p), "over_large.png")?;
    save(&|p| overlay(gt, &hard, [255, 255, 0]).save(p), "hard.png")?;
    render.image.save_png(&out.join("render.png"))?;
    fs::write(out.join("over_large.csv"), points_csv(&over))?;
    fs::write(out.join("hard.csv"), points_csv(&hard))?;
    let mut g = String::from("gaussian,visible,viewspace_grad_norm,mean_grad_norm,pixel_count\n");
    for i in 0..cloud.len() {
        let _ = writeln!(
            g,
            "{i},{},{:e},{:e},{}",
            render.visible[i] as u8,
            grads.viewspace_grads[i].norm(),
            grads.d_means[i].norm(),
            render.pixel_counts[i]
        );
    }
    fs::write(out.join("gradients.csv"), g)?;
    Ok(DiagBundle {
        render,
        ssim,
        over_large: over,
        hard,
    })
}
