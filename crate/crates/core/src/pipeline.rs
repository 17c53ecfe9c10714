//! End-to-end review: overview proposal, crop acquisition, diagnosis, report.

use crate::client::Client;
use crate::config::Config;
use crate::error::Result;
use crate::evaluation::DrawingPrediction;
use crate::prompts::{ReviewTask, TemplateSet};
use crate::pyramid::RasterImage;
use crate::report::{Provenance, ReviewReport, Timings, REPORT_SCHEMA_VERSION};
use crate::stage1::{propose_regions, SemanticRegion};
use crate::stage2::{acquire, ExternalOcr, ExtractedElement, NoOcr, OcrEngine};
use crate::stage3;

pub struct Pipeline {
    cfg: Config,
    client: Client,
    templates: TemplateSet,
    ocr: Box<dyn OcrEngine>,
}

#[derive(Debug, Clone)]
pub struct ReviewOutcome {
    pub report: ReviewReport,
    pub regions: Vec<SemanticRegion>,
    pub elements: Vec<ExtractedElement>,
    pub warnings: Vec<String>,
}

impl ReviewOutcome {
    pub fn prediction(&self) -> DrawingPrediction {
        DrawingPrediction {
            drawing_id: self.report.drawing_id.clone(),
            regions: self.regions.clone(),
            findings: self.report.findings.clone(),
        }
    }
}

impl Pipeline {
    /// Backend, cache, templates and OCR adapter as configured.
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let client = Client::from_config(&cfg.backend)?;
        Self::with_client(cfg, client)
    }

    pub fn with_client(cfg: Config, client: Client) -> Result<Self> {
        let templates = match &cfg.templates_dir {
            Some(dir) => TemplateSet::load(dir)?,
            None => TemplateSet::builtin(),
        };
        let ocr: Box<dyn OcrEngine> = match cfg.ocr_command.as_deref().and_then(ExternalOcr::from_command) {
            Some(o) => Box::new(o),
            None => Box::new(NoOcr),
        };
        Ok(Pipeline {
            cfg,
            client,
            templates,
            ocr,
        })
    }

    pub fn with_ocr(mut self, ocr: Box<dyn OcrEngine>) -> Self {
        self.ocr = ocr;
        self
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn review(&self, drawing: &RasterImage, task: &ReviewTask) -> Result<ReviewOutcome> {
        task.validate()?;
        let cfg = &self.cfg;
        let s1 = propose_regions(drawing, task, cfg, &self.client, &self.templates.stage1)?;
        log::info!("{}: {} regions", drawing.source_id(), s1.regions.len());
        let s2 = acquire(
            drawing,
            &s1.regions,
            task,
            cfg,
            &self.client,
            &self.templates.stage2,
            self.ocr.as_ref(),
        )?;
        log::info!(
            "{}: {} elements from {} crops ({} failed)",
            drawing.source_id(),
            s2.elements.len(),
            s2.crop_count,
            s2.failed_crops.len()
        );
        let s3 = stage3::review(
            &s2.elements,
            &s1.regions,
            drawing,
            Some(&s1.overview.image),
            task,
            cfg,
            &self.client,
            &self.templates.stage3,
        )?;

        let report = ReviewReport {
            schema_version: REPORT_SCHEMA_VERSION.into(),
            drawing_id: drawing.source_id().to_owned(),
            task: task.clone(),
            findings: s3.findings,
            conflicts: s3.conflicts,
            failed_crops: s2.failed_crops,
            provenance: Provenance {
                config_digest: cfg.digest(),
                template_digests: self.templates.digests(),
                backend_id: self.client.backend_id(),
                reliability_formula: cfg.reliability_formula.as_str().into(),
            },
            timings: Timings {
                stage1_ms: s1.latency_ms,
                stage2_ms: s2.latency_ms,
                stage3_ms: s3.latency_ms,
            },
        };
        let mut warnings = s1.warnings;
        warnings.extend(s2.warnings);
        warnings.extend(s3.warnings);
        for w in &warnings {
            log::debug!("{}: {w}", drawing.source_id());
        }
        Ok(ReviewOutcome {
            report,
            regions: s1.regions,
            elements: s2.elements,
            warnings,
        })
    }
}
