//! Contrastive training loop: augment, sample architectures, encode both
//! views, InfoNCE, backpropagate, Adam.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{fixed_eval_arch, ArchSampler, EncoderArch};
use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::encoder::{forward_pair, Model};
use crate::error::{Error, Result};
use crate::graph::{build_filter, GraphFilter};
use crate::loss;
use crate::matrix::{Matrix, Real};
use crate::optim::Adam;
use crate::rng::{substream, Stream};
use crate::tape::Tape;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub align: f64,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "L2")]
    pub l2: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
}

/// Per-epoch observer. Returning an error aborts training.
pub trait EpochObserver {
    fn on_epoch(&mut self, log: &EpochLog) -> Result<()>;
}

impl<F: FnMut(&EpochLog) -> Result<()>> EpochObserver for F {
    fn on_epoch(&mut self, log: &EpochLog) -> Result<()> {
        self(log)
    }
}

/// Observer that ignores every epoch.
pub fn no_observer(_: &EpochLog) -> Result<()> {
    Ok(())
}

/// Runs the full training schedule. The result is a deterministic
/// function of `(dataset, cfg)`.
pub fn train<T: Real>(dataset: &Dataset, cfg: &TrainConfig, mut observer: impl EpochObserver) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    let sampler = ArchSampler::new(cfg.sampler_config())?;
    let (activation, slope, substituted) = cfg.resolved_activation();
    if substituted {
        log::warn!("rrelu is trained as prelu with initial slope {slope}");
    }
    let features: Matrix<T> = dataset.features.cast();
    let mut model = Model::<T>::init(
        dataset.num_features(),
        cfg.hidden_size,
        cfg.proj_size,
        cfg.n_transforms,
        activation,
        slope,
        &mut substream(cfg.seed, Stream::Init),
    )?;
    let mut rng_view1 = substream(cfg.seed, Stream::GdaView1);
    let mut rng_view2 = substream(cfg.seed, Stream::GdaView2);
    let mut rng_arch = substream(cfg.seed, Stream::Sampler);
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let entry = (|| -> Result<EpochLog> {
            let (a1, a2) = sampler.sample(&mut rng_arch)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let (z1, z2) = forward_pair(
                dataset,
                &features,
                &cfg.gda,
                cfg.pi,
                (&a1, &a2),
                &bound,
                (&mut rng_view1, &mut rng_view2),
                &mut tape,
            )?;
            let l = loss::info_nce(&mut tape, z1, z2, cfg.symmetric_loss)?;
            let loss_value = tape.value(l)[(0, 0)].as_f64();
            let align = loss::alignment_metric(tape.value(z1), tape.value(z2))?;
            let mut grads = tape.backward(l)?;
            let gs: Vec<Matrix<T>> = bound
                .vars()
                .into_iter()
                .map(|v| grads.take(v).ok_or_else(|| Error::Internal("missing parameter gradient".into())))
                .collect::<Result<_>>()?;
            adam.step(&mut model.params_mut(), &gs.iter().collect::<Vec<_>>())?;
            Ok(EpochLog {
                epoch,
                loss: loss_value,
                align,
                l: a1.total(),
                l2: a2.total(),
                seconds: start.elapsed().as_secs_f64(),
            })
        })()
        .map_err(|e| Error::Epoch {
            epoch,
            source: Box::new(e),
        })?;
        observer.on_epoch(&entry)?;
        log.push(entry);
    }
    Ok(TrainOutput { model, log })
}

/// Filter of the unaugmented graph.
pub fn full_filter(dataset: &Dataset, pi: f64) -> Result<Arc<GraphFilter>> {
    Ok(Arc::new(build_filter(&dataset.graph, pi)?))
}

/// Architecture used for downstream embeddings under `cfg`.
pub fn eval_arch(cfg: &TrainConfig) -> EncoderArch {
    fixed_eval_arch(cfg.n_transforms, cfg.eval_k)
}

/// Frozen node embeddings: encoder on the full graph under the evaluation
/// architecture, projector dropped.
pub fn embed<T: Real>(model: &Model<T>, dataset: &Dataset, cfg: &TrainConfig) -> Result<Matrix<T>> {
    let filter = full_filter(dataset, cfg.pi)?;
    model.embed(&filter, &dataset.features.cast(), &eval_arch(cfg))
}
