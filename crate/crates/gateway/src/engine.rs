//! Index, segment catalog and panorama source, loaded once and shared
//! read-only by the CLI and the HTTP service.

use std::path::{Path, PathBuf};

use streetgen_core::fixtures;
use streetgen_core::pano_index::{IngestReport, PanoIndex, TrajectorySegment, DEFAULT_MAX_GAP_M, DEFAULT_TARGET_SPACING_M};
use streetgen_core::retrieval_planner::{plan_condition_path, validate_plan, PlanDiagnostics, PlannerParams, RetrievalPlan, SegmentCatalog, UserPath};
use streetgen_core::session_engine::{
    render_step_view, start_session, DefaultPanoSource, SessionContext, SessionParams, SessionState,
};
use streetgen_core::ImageBuffer;

use crate::api::ApiError;

pub struct Engine {
    pub index: PanoIndex,
    pub segments: Vec<TrajectorySegment>,
    pub catalog: SegmentCatalog,
    pub source: DefaultPanoSource,
    /// Ingest report when loaded from a manifest.
    pub report: Option<IngestReport>,
}

impl Engine {
    pub fn new(index: PanoIndex, image_root: Option<PathBuf>) -> Result<Self, ApiError> {
        let segments = if index.is_empty() {
            Vec::new()
        } else {
            index.group_trajectories(DEFAULT_MAX_GAP_M, Some(DEFAULT_TARGET_SPACING_M))?
        };
        let catalog = SegmentCatalog::new(segments.clone())?;
        Ok(Self { index, segments, catalog, source: DefaultPanoSource::new(image_root), report: None })
    }

    /// Loads a manifest; relative image URIs resolve against its directory.
    pub fn from_manifest(path: &Path) -> Result<Self, ApiError> {
        let (index, report) = PanoIndex::from_manifest(path)?;
        let root = path.parent().map(Path::to_path_buf);
        let mut engine = Self::new(index, root)?;
        engine.report = Some(report);
        Ok(engine)
    }

    pub fn from_fixture(name: &str, seed: u64) -> Result<Self, ApiError> {
        let corpus = fixtures::by_name(name, seed)
            .ok_or_else(|| ApiError::bad_request(format!("unknown fixture {name:?}; expected grid-city, grid-city-drives, junction or loop")))?;
        Self::new(corpus.index()?, None)
    }

    pub fn ctx(&self) -> SessionContext<'_> {
        SessionContext { index: &self.index, source: &self.source }
    }

    pub fn plan(&self, path: &UserPath, params: &PlannerParams) -> Result<(RetrievalPlan, PlanDiagnostics), ApiError> {
        let plan = plan_condition_path(path, &self.index, &self.catalog, params)?;
        let diagnostics = validate_plan(&plan, &self.index, params)?;
        Ok((plan, diagnostics))
    }

    /// Starts a session; without a first image, the crop at the first plan
    /// step is used.
    pub fn start(
        &self,
        id: &str,
        path: &UserPath,
        params: &SessionParams,
        first_image: Option<ImageBuffer>,
    ) -> Result<SessionState, ApiError> {
        let first = match first_image {
            Some(img) => img,
            None => {
                let plan = plan_condition_path(path, &self.index, &self.catalog, &params.planner)?;
                render_step_view(&self.ctx(), &plan.steps[0], params)?
            }
        };
        Ok(start_session(id, first, path, &self.index, &self.catalog, params)?)
    }
}
