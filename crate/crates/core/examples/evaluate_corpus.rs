//! Leave-one-out evaluation of a small noisy synthetic corpus written to disk.

use gridlens::client::MockBackend;
use gridlens::evaluation::{default_grid, load_corpus, loocv, summary_table};
use gridlens::synth::{generate_corpus, write_corpus, NoiseSpec, ScenarioSpec};
use gridlens::{Client, Config, Pipeline, RasterImage};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ScenarioSpec {
        seed: 5,
        n_drawings: 4,
        width: 1920,
        height: 1080,
        noise: NoiseSpec { bbox_jitter_px: 4.0, confidence_mean: 0.75, confidence_sigma: 0.1, ..NoiseSpec::default() },
        ..ScenarioSpec::default()
    };
    let dir = tempfile::tempdir()?;
    let corpus = generate_corpus(&spec)?;
    write_corpus(&corpus, dir.path())?;

    let cfg = Config::default();
    let vocab = cfg.expected_labels.clone();
    let pipeline = Pipeline::with_client(cfg, Client::new(Box::new(MockBackend::new(corpus.scenario.clone())), None))?;
    let annotated = load_corpus(dir.path())?;
    let result = loocv(&annotated, &default_grid(), &vocab, 2, |a| {
        Ok(pipeline.review(&RasterImage::load(&a.drawing_path)?, &corpus.task)?.prediction())
    })?;
    for f in &result.folds {
        println!("fold {} ({}): threshold {:.2}", f.fold_index, f.drawing_id, f.tuned_threshold);
    }
    print!("{}", summary_table(&result));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
