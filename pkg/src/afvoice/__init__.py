"""Streaming speech codec, TTS runtime, feature front end and latency harness."""
from .dsp import AudioBuffer, MelSpectrogram, StftFrames, istft, mel_spectrogram, resample, stft
from .errors import AFVoiceError, ConfigMismatch, FormatError, InvalidConfig
from .features import FeatureExtractor, FeatureSequence, WindowPlan
from .rvq import CodebookSet, ResidualVectorQuantizer, rvq_decode, rvq_encode, train_codebooks
from .tts import Session, StreamingTTS, TTSConfig, UnmaskSchedule, synthesize
from .bench import LatencyReport, analyze, bench_synthesize
from .config import RunConfig
from .codec import CodecConfig, NeuralCodec, synthetic_tones

__version__ = "0.1.0"
