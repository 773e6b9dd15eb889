use super::{RewardShaper, ShaperContext, ShaperError, ShaperOutput};
use crate::shaping::{gradient_estimate, sa_update, ScalarizationConfig, ShapingReward};

/// Stochastic-approximation ascent on the scalarized objective.
///
/// Episode 0 gets zero shaping. Each later episode moves the previous
/// vector along the gradient estimated from the latest episode.
#[derive(Clone, Debug)]
pub struct AnalyticShaper {
    cfg: ScalarizationConfig,
    current: Option<ShapingReward>,
}

impl AnalyticShaper {
    pub fn new(cfg: ScalarizationConfig) -> Self {
        Self { cfg, current: None }
    }

    pub fn config(&self) -> &ScalarizationConfig {
        &self.cfg
    }
}

impl RewardShaper for AnalyticShaper {
    fn tag(&self) -> &'static str {
        "analytic"
    }

    fn propose(&mut self, ctx: &ShaperContext<'_>) -> Result<ShaperOutput, ShaperError> {
        let n = ctx.env.n_classes();
        let invalid = |source| ShaperError::Invalid { k: ctx.k, source };
        if ctx.k == 0 {
            let zero = ShapingReward::zeros(n);
            self.current = Some(zero.clone());
            return Ok(ShaperOutput {
                shaping: zero,
                rationale: None,
                backend: self.tag().into(),
                gradient: None,
                warnings: Vec::new(),
            });
        }
        let latest = ctx
            .history
            .get(ctx.k - 1)
            .ok_or(ShaperError::MissingHistory { k: ctx.k })?;
        let prev = self.current.clone().unwrap_or_else(|| ShapingReward::zeros(n));
        let g = gradient_estimate(latest, ctx.pref, &self.cfg).map_err(invalid)?;
        let next = sa_update(&prev, &g, ctx.k, &self.cfg).map_err(invalid)?;
        next.validate(n, self.cfg.r_max).map_err(invalid)?;
        self.current = Some(next.clone());
        Ok(ShaperOutput {
            shaping: next,
            rationale: None,
            backend: self.tag().into(),
            gradient: Some(g),
            warnings: Vec::new(),
        })
    }
}
