//! Builds a [`Task`] from a [`RunConfig`].

use std::path::Path;

use crate::config::{RunConfig, TaskConfig};
use crate::data::{corpus_from_text, load_text_corpus, split, synthetic_text};
use crate::error::Result;
use crate::experiments::Task;
use crate::fastforward::{run_schedule, FastForwardConfig, ScheduleConfig, StopCriterion};
use crate::model::{make_char_lm, make_classification_data, make_mlp, make_synthetic_lowrank, CharLmConfig};
use crate::optim::{AdamConfig, AdamState, Optimizer};

/// `base_dir` resolves relative corpus paths (normally the config file's
/// directory).
pub fn build_task(cfg: &RunConfig, base_dir: &Path) -> Result<Task> {
    let seed = cfg.seed;
    let (test, val) = (cfg.data.test_count, cfg.data.val_count);
    let (base, data) = match &cfg.task {
        TaskConfig::Synthetic {
            d,
            k,
            true_rank,
            noise_std,
            examples,
        } => {
            let t = make_synthetic_lowrank(*d, *k, *true_rank, *noise_std, *examples, seed)?;
            (t.model, split(&t.data, test, val, seed)?)
        }
        TaskConfig::Mlp {
            in_dim,
            hidden,
            classes,
            examples,
        } => {
            let data = make_classification_data(*in_dim, *classes, *examples, seed)?;
            (make_mlp(*in_dim, *hidden, *classes, seed)?, split(&data, test, val, seed)?)
        }
        TaskConfig::CharLm {
            corpus,
            synthetic_chars,
            embed_dim,
            layer_count,
            head_count,
            context_length,
            pretrain_steps,
            pretrain_lr,
        } => {
            let text = match corpus {
                Some(p) => load_text_corpus(base_dir.join(p), *context_length, test, val, seed)?,
                None => corpus_from_text(&synthetic_text(seed, *synthetic_chars), *context_length, test, val, seed)?,
            };
            let lm = CharLmConfig {
                vocab_size: text.vocab.size(),
                embed_dim: *embed_dim,
                layer_count: *layer_count,
                head_count: *head_count,
                context_length: *context_length,
            };
            let mut model = make_char_lm(&lm, seed)?;
            if *pretrain_steps > 0 {
                let schedule = ScheduleConfig::new(cfg.train.batch_size, FastForwardConfig::disabled());
                let run = run_schedule(
                    model,
                    Optimizer::Adam(AdamState::new(AdamConfig::with_lr(*pretrain_lr))),
                    &text.splits,
                    &schedule,
                    StopCriterion::Steps(*pretrain_steps),
                    seed,
                )?;
                model = run.model;
            }
            (model, text.splits)
        }
    };
    Ok(Task {
        base,
        data,
        adapter: cfg.adapter.clone(),
        seed,
    })
}
