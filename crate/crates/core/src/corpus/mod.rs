//! Synthetic spoken QA corpus.

pub mod audio;
pub mod channel;
pub mod dataset;
pub mod io;
pub mod vocab;
pub mod wer;

pub use audio::{synthesize_audio_word, synthesize_passage, AsrOrigin, AsrOutput, AudioConfig, AudioWord, SpokenPassage};
pub use channel::{apply_asr_channel, ChannelConfig};
pub use dataset::{generate_qa_dataset, CorpusConfig, QaDataset, QaExample, Split, SplitName};
pub use io::{load_dataset, save_dataset};
pub use vocab::{build_vocabulary, VocabConfig, Vocabulary};
pub use wer::compute_wer;
