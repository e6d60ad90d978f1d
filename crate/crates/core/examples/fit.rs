//! Fits a model to a PNG and reports validation PSNR as training runs.
//!
//! `cargo run --release -p gaussfield --example fit -- image.png [iterations]`

use std::ops::ControlFlow;
use std::time::Instant;

use gaussfield::{io, Model, ModelConfig, TrainOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().ok_or("usage: fit <image.png> [iterations]")?;
    let mut cfg = ModelConfig::default();
    if let Some(it) = args.next() {
        cfg.iterations = it.parse()?;
    }
    let image = io::load_image(&path)?;
    let start = Instant::now();
    let model = Model::init(&image, cfg, 0)?;
    let model = gaussfield::train(model, &image, &TrainOptions::default(), |r| {
        println!("{:>5}  loss {:.5}  psnr {:.2}  {:.1}s", r.iter, r.loss, r.psnr, start.elapsed().as_secs_f64());
        ControlFlow::Continue(())
    })?;
    let model = model.bake()?;
    let out = model.render_native()?;
    println!("final psnr {:.2} dB in {:.1}s", gaussfield::psnr(&out, &image)?, start.elapsed().as_secs_f64());
    Ok(())
}
