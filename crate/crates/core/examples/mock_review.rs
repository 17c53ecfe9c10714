//! Review one synthetic drawing end to end against its scripted mock backend
//! and print the Markdown report.

use gridlens::client::MockBackend;
use gridlens::report::{render_report, ReportFormat};
use gridlens::synth::{generate_corpus, ScenarioSpec};
use gridlens::{Client, Config, Pipeline};

pub fn run_example() -> gridlens::Result<()> {
    let spec = ScenarioSpec { n_drawings: 2, violation_rate: 0.5, width: 1920, height: 1080, ..ScenarioSpec::default() };
    let corpus = generate_corpus(&spec)?;
    let pipeline = Pipeline::with_client(Config::default(), Client::new(Box::new(MockBackend::new(corpus.scenario.clone())), None))?;

    for d in &corpus.drawings {
        let outcome = pipeline.review(&d.image, &corpus.task)?;
        println!(
            "{}: {} regions, {} elements, truly violating: {}",
            d.truth.drawing_id,
            outcome.regions.len(),
            outcome.elements.len(),
            d.truth.violating
        );
        if outcome.report.has_violations() {
            print!("{}", String::from_utf8_lossy(&render_report(&outcome.report, ReportFormat::Markdown)));
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gridlens::Result<()> {
    run_example()
}
