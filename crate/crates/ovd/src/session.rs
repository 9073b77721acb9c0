//! A loaded run: bundle, bank, backbones and the configured pipeline.

use ovd_core::classify::build_bank;
use ovd_core::pipelines::{Instrument, Pipeline, PipelineError};
use ovd_core::providers::{make_stub, RegionEncoder, StagedBackbone};
use ovd_core::{Detection, EmbeddingBank, ImageId};
use rayon::prelude::*;

use crate::bankfile::read_bank;
use crate::config::{FeatureMode, RunConfig};
use crate::error::{Error, Result};
use crate::fixtures::{load_fixtures, Fixtures};

#[derive(Debug)]
pub struct Session {
    pub config: RunConfig,
    pub fixtures: Fixtures,
    pub bank: EmbeddingBank,
    pub detector: StagedBackbone,
}

fn runtime_error(e: PipelineError) -> Error {
    Error::schema(e)
}

impl Session {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let fixtures = load_fixtures(&config.fixtures)?;
        let bank = match &config.bank {
            Some(path) => read_bank(path)?,
            None => build_bank(&fixtures.prompts).map_err(Error::schema)?,
        };
        let bank = bank
            .with_background(config.background.logit, config.background.weight)
            .map_err(Error::config)?;
        let detector = match &config.detector {
            Some(spec) => spec.build()?,
            None => {
                let spec = fixtures.manifest.backbone.as_ref().expect("checked by load_fixtures");
                make_stub(spec.seed.wrapping_add(1), &spec.arch).map_err(Error::config)?
            }
        };
        let session = Session {
            config,
            fixtures,
            bank,
            detector,
        };
        session.pipeline()?;
        Ok(session)
    }

    pub fn classifier(&self) -> &dyn RegionEncoder {
        match self.config.features {
            FeatureMode::Replay => &self.fixtures.encoder,
            FeatureMode::Live => self.fixtures.backbone(),
        }
    }

    pub fn pipeline(&self) -> Result<Pipeline<'_>> {
        Pipeline::new(
            &self.config.pipeline,
            self.classifier(),
            Some(&self.detector),
            &self.fixtures.proposals,
            &self.bank,
        )
        .map_err(|e| match e {
            PipelineError::EmbedDim { .. } => Error::schema(e),
            e => Error::config(e),
        })
    }

    pub fn image_ids(&self) -> Vec<ImageId> {
        self.fixtures.images.keys().copied().collect()
    }

    pub fn detect_image<I: Instrument + ?Sized>(
        &self,
        pipeline: &Pipeline<'_>,
        id: ImageId,
        inst: &mut I,
    ) -> Result<Vec<Detection>> {
        let img = &self.fixtures.images[&id];
        pipeline.detect(id, img, inst).map_err(runtime_error)
    }

    /// Detections for every image, ordered by image id. The result does not
    /// depend on `workers`.
    pub fn detect(&self, workers: usize) -> Result<Vec<Detection>> {
        if workers == 0 {
            return Err(Error::config("--workers must be at least 1"));
        }
        let pipeline = self.pipeline()?;
        let ids = self.image_ids();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(Error::config)?;
        let per_image: Vec<Vec<Detection>> = pool.install(|| {
            ids.par_iter()
                .map(|&id| self.detect_image(&pipeline, id, &mut ()))
                .collect::<Result<_>>()
        })?;
        Ok(per_image.into_iter().flatten().collect())
    }
}
