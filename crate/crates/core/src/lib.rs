//! Few-shot text classification as text-pair relevance estimation.
//!
//! Every training sample is paired with every other through a prompt
//! template with a mask slot. A relevance scorer reads its mask-position word
//! distribution through a fixed meta verbalizer ("relevant / similar /
//! consistent" against "irrelevant / inconsistent / different") and is trained
//! to tell same-class pairs from different-class pairs. A query is then scored
//! against each training sample and the scores are pooled per label.
//!
//! ```
//! use metricprompt::corpus::sample_episode;
//! use metricprompt::pooling::{classify_matrix, PoolingMethod};
//! use metricprompt::scorer::{score_matrix, LexicalOverlapScorer};
//!
//! let data = metricprompt::synthetic::four_class();
//! let episode = sample_episode(&data, 2, 20, 7).unwrap();
//! let matrix = score_matrix(&LexicalOverlapScorer, &episode).unwrap();
//! let predictions = classify_matrix(&matrix, PoolingMethod::Mean).unwrap();
//! assert_eq!(predictions.len(), 20);
//! ```

pub mod analysis;
pub mod corpus;
pub mod experiment;
pub mod pivot;
pub mod pooling;
pub mod prompting;
pub mod scorer;
pub mod synthetic;
