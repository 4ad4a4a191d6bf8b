//! Asynchronous multi-threaded training. Workers own disjoint document
//! shards and their variational state; parameters and Adagrad
//! accumulators are shared cells updated with unsynchronized
//! load/store pairs. Each cell is an `AtomicU64` holding f64 bits, so
//! reads never tear, but concurrent updates to the same cell may be lost
//! and the application order is not deterministic.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    accumulate_weighted_gradient, e_step, elbo, minibatches, rho, GammaScale, TrainConfig, TrainLog, TrainOutput,
    TrainRecord, MAX_NON_FINITE_STEPS,
};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGrads};
use crate::numerics::{adagrad_delta, clip_global_norm};

struct SharedCells {
    params: Vec<Vec<AtomicU64>>,
    accumulators: Vec<Vec<AtomicU64>>,
}

impl SharedCells {
    fn new(params: &ModelParams) -> Self {
        let to_cells = |s: &[f64]| s.iter().map(|v| AtomicU64::new(v.to_bits())).collect::<Vec<_>>();
        Self {
            params: params.blocks().iter().map(|b| to_cells(b.as_slice())).collect(),
            accumulators: params
                .blocks()
                .iter()
                .map(|b| to_cells(&vec![0.0; b.as_slice().len()]))
                .collect(),
        }
    }

    fn snapshot_into(&self, out: &mut ModelParams) {
        for (cells, block) in self.params.iter().zip(out.blocks_mut()) {
            for (c, v) in cells.iter().zip(block.as_mut_slice()) {
                *v = f64::from_bits(c.load(Ordering::Relaxed));
            }
        }
    }

    fn apply(&self, grads: &ParamGrads, learning_rate: f64, epsilon: f64) {
        for ((cells, accs), block) in self.params.iter().zip(&self.accumulators).zip(grads.blocks()) {
            for ((c, a), &g) in cells.iter().zip(accs).zip(block.as_slice()) {
                if g == 0.0 {
                    continue;
                }
                let acc = f64::from_bits(a.load(Ordering::Relaxed)) + g * g;
                a.store(acc.to_bits(), Ordering::Relaxed);
                let p = f64::from_bits(c.load(Ordering::Relaxed)) + adagrad_delta(acc, g, learning_rate, epsilon);
                c.store(p.to_bits(), Ordering::Relaxed);
            }
        }
    }
}

pub(super) fn train_async(corpus: &Corpus, config: &TrainConfig, init: ModelParams) -> Result<TrainOutput> {
    let dims = init.dims;
    let shared = SharedCells::new(&init);
    let step = AtomicU64::new(0);
    let abort = AtomicBool::new(false);
    let total_sentences = corpus.sentence_count();
    let gammas = Mutex::new(vec![vec![config.gamma_init; config.topics]; corpus.documents.len()]);
    let records = Mutex::new(Vec::new());
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let started = Instant::now();

    std::thread::scope(|scope| {
        for worker in 0..config.threads {
            let (shared, step, abort, gammas, records, first_error) =
                (&shared, &step, &abort, &gammas, &records, &first_error);
            scope.spawn(move || {
                let mut shard: Vec<usize> = (worker..corpus.documents.len()).step_by(config.threads).collect();
                let mut local_gammas: Vec<Vec<f64>> = shard.iter().map(|_| vec![config.gamma_init; config.topics]).collect();
                let mut slot_of: Vec<usize> = (0..shard.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1 + worker as u64));
                let mut local = ModelParams::zeros(dims);
                let mut grads = ParamGrads::zeros(dims);
                let mut local_records = Vec::new();
                let mut bad_streak = 0;
                let result: Result<()> = (|| {
                    for epoch in 0..config.epochs {
                        if config.shuffle {
                            slot_of.shuffle(&mut rng);
                        }
                        for &slot in &slot_of {
                            let d = shard[slot];
                            let doc = &corpus.documents[d];
                            let n_scale = match config.gamma_scale {
                                GammaScale::PerDocument => doc.sentences.len(),
                                GammaScale::CorpusTotal => total_sentences,
                            };
                            for batch in minibatches(doc, config.minibatch) {
                                if abort.load(Ordering::Relaxed) {
                                    return Ok(());
                                }
                                let t = step.fetch_add(1, Ordering::Relaxed) + 1;
                                let rho_t = rho(t, config.tau0, config.kappa)?;
                                shared.snapshot_into(&mut local);
                                let es = e_step(&batch, &local_gammas[slot], &local, config, rho_t, n_scale)?;
                                let batch_elbo = elbo(&es.phi, &es.gamma, &es.beta, config.alpha);
                                grads.clear();
                                accumulate_weighted_gradient(&batch, &es.phi, &local, config.mode, &mut grads)?;
                                let clipped = {
                                    let mut blocks: Vec<&mut [f64]> =
                                        grads.blocks_mut().into_iter().map(|b| b.as_mut_slice()).collect();
                                    clip_global_norm(&mut blocks, config.clip)
                                };
                                let (grad_norm, skipped) = match clipped {
                                    Ok(n) => (n, false),
                                    Err(Error::NonFinite(_)) => (f64::NAN, true),
                                    Err(e) => return Err(e),
                                };
                                if skipped || !batch_elbo.is_finite() {
                                    bad_streak += 1;
                                    if bad_streak > MAX_NON_FINITE_STEPS {
                                        return Err(Error::NonFinite(format!(
                                            "training objective for more than {MAX_NON_FINITE_STEPS} consecutive steps (worker {worker})"
                                        )));
                                    }
                                } else {
                                    bad_streak = 0;
                                    shared.apply(&grads, config.learning_rate, config.adagrad_epsilon);
                                    local_gammas[slot] = es.gamma;
                                }
                                local_records.push(TrainRecord {
                                    step: t,
                                    epoch,
                                    doc: d,
                                    rho: rho_t,
                                    elbo: batch_elbo,
                                    grad_norm,
                                    skipped,
                                    wall_time_s: started.elapsed().as_secs_f64(),
                                });
                            }
                        }
                    }
                    Ok(())
                })();
                if let Err(e) = result {
                    abort.store(true, Ordering::Relaxed);
                    first_error.lock().unwrap().get_or_insert(e);
                }
                let mut g = gammas.lock().unwrap();
                for (d, gamma) in shard.drain(..).zip(local_gammas) {
                    g[d] = gamma;
                }
                records.lock().unwrap().extend(local_records);
            });
        }
    });

    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let mut params = ModelParams::zeros(dims);
    shared.snapshot_into(&mut params);
    let mut records = records.into_inner().unwrap();
    records.sort_by_key(|r| r.step);
    Ok(TrainOutput {
        params,
        gammas: gammas.into_inner().unwrap(),
        log: TrainLog { records },
    })
}
