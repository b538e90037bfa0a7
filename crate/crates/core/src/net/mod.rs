//! Text encoder, speech encoder, speech decoder and text decoder built from
//! filter-gate, speaker-bias filter-gate, highway and quasi-recurrent layers
//! described by an [`ArchManifest`].

mod checkpoint;
mod layers;
mod manifest;
mod networks;
mod state;

pub use checkpoint::Checkpoint;
pub use layers::{
    apply_layer, dropout, filter_gate, filter_gate_layer, filter_gate_speaker_layer, highway, highway_layer,
    init_layer, padding, param_shapes, past_radius, qrnn, FilterGateParams, HighwayParams, Pass, SpeakerBiases,
};
pub use manifest::{ArchManifest, LayerKind, LayerSpec, ModelDims};
pub use networks::{
    decoder_context_graph, decoder_output_radius, normalize_mel, remove_speaker_biases, reparameterize,
    speech_decoder_forward, speech_decoder_graph, speech_encoder_forward, speech_encoder_graph, standard_normal,
    text_decoder_forward, text_decoder_graph, text_encoder_forward, text_encoder_graph, LLEDistribution, LLESequence,
    Noise, PastMel,
};
pub(crate) use state::{meta_tensors, split_meta};
pub use state::{ModelState, SpeakerBiasTable, StageFlags, NORM_MEAN, NORM_STD};
