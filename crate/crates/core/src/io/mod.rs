//! File formats: PCM16 WAV input, cycle annotations, dataset manifests,
//! spectrogram export and probability tables.

mod annotations;
mod dataset;
mod export;
mod wav;

pub use annotations::{parse_cycle_annotations, parse_cycle_annotations_str, AnnotationRecord};
pub use dataset::{build_event_dataset, ClipInfo, EventDataset, LabelScheme, Manifest, ManifestEntry, ManifestTarget};
pub use export::{
    read_probability_csv, read_spectrogram_bin, read_spectrogram_csv, read_truth_csv, write_probability_csv,
    write_spectrogram_bin, write_spectrogram_csv, ProbabilityTable,
};
pub use wav::{decode_wav, load_wav, load_wav_native};
