//! Every runnable example completes without error.

#[path = "../examples/overview_and_crop.rs"]
mod overview_and_crop;

#[path = "../examples/coordinate_restoration.rs"]
mod coordinate_restoration;

#[path = "../examples/nms_proposals.rs"]
mod nms_proposals;

#[path = "../examples/parse_model_output.rs"]
mod parse_model_output;

#[path = "../examples/conflict_resolution.rs"]
mod conflict_resolution;

#[path = "../examples/grounding_check.rs"]
mod grounding_check;

#[path = "../examples/mock_review.rs"]
mod mock_review;

#[path = "../examples/evaluate_corpus.rs"]
mod evaluate_corpus;



#[test]
fn overview_and_crop() {
    overview_and_crop::run_example().unwrap();
}

#[test]
fn coordinate_restoration() {
    coordinate_restoration::run_example().unwrap();
}

#[test]
fn nms_proposals() {
    nms_proposals::run_example().unwrap();
}

#[test]
fn parse_model_output() {
    parse_model_output::run_example().unwrap();
}

#[test]
fn conflict_resolution() {
    conflict_resolution::run_example().unwrap();
}

#[test]
fn grounding_check() {
    grounding_check::run_example().unwrap();
}

#[test]
fn mock_review() {
    mock_review::run_example().unwrap();
}

#[test]
fn evaluate_corpus() {
    evaluate_corpus::run_example().unwrap();
}

#[test]
fn http_backend() {
    http_backend::run_example().unwrap();
}
