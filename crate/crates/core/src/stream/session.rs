use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Map, Value};

use super::ring::{capacity_for, ring_buffer};
use crate::audio::{AudioSignal, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::fusion::ProbabilityVector;
use crate::io::load_wav;
use crate::model::ReneModel;

/// Simulated microphone input.
#[derive(Debug, Clone)]
pub enum Source {
    Wav(PathBuf),
    Signal(AudioSignal),
}

impl Source {
    fn load(&self) -> Result<Vec<f32>> {
        let signal = match self {
            Source::Wav(path) => load_wav(path)?,
            Source::Signal(s) if s.sample_rate() == CANONICAL_SAMPLE_RATE => s.clone(),
            Source::Signal(s) => s.resample(CANONICAL_SAMPLE_RATE)?,
        };
        Ok(signal.samples().iter().map(|&v| v as f32).collect())
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub frame_unit_ms: f64,
    pub window_s: f64,
    pub buffer_min: f64,
    pub source: Source,
    /// 1.0 is real time; larger values replay faster.
    pub rate_factor: f64,
}

impl SessionConfig {
    pub fn new(source: Source) -> Self {
        Self {
            frame_unit_ms: 10.0,
            window_s: 10.0,
            buffer_min: 60.0,
            source,
            rate_factor: 1.0,
        }
    }

    fn samples(&self, seconds: f64, what: &str) -> Result<usize> {
        let exact = seconds * f64::from(CANONICAL_SAMPLE_RATE);
        let n = exact.round();
        if !(n >= 1.0 && (exact - n).abs() < 1e-6) {
            return Err(Error::invalid(format!("{what} of {seconds} s is not a whole number of samples")));
        }
        Ok(n as usize)
    }

    pub fn unit_samples(&self) -> Result<usize> {
        self.samples(self.frame_unit_ms / 1000.0, "frame unit")
    }

    pub fn window_samples(&self) -> Result<usize> {
        self.samples(self.window_s, "window")
    }

    pub fn capacity(&self) -> usize {
        capacity_for(CANONICAL_SAMPLE_RATE, self.buffer_min)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = self.unit_samples()?;
        let window = self.window_samples()?;
        if window % unit != 0 {
            return Err(Error::invalid("the frame unit must divide the window"));
        }
        if self.capacity() < window || !self.capacity().is_multiple_of(unit) {
            return Err(Error::invalid(
                "the buffer must hold at least one window and a whole number of units",
            ));
        }
        if !(self.rate_factor.is_finite() && self.rate_factor > 0.0) {
            return Err(Error::invalid(format!("rate factor {} must be positive", self.rate_factor)));
        }
        Ok(())
    }
}

/// One decoded window.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvent {
    /// Window number since session start.
    pub index: u64,
    /// Stream time of the window's end, in seconds.
    pub t: f64,
    /// Absolute sample span `[start, end)`.
    pub start: u64,
    pub end: u64,
    pub probs: ProbabilityVector,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamMessage {
    Event(StreamEvent),
    /// The decoder fell behind and jumped from window `from` to `to`.
    Overrun { from: u64, to: u64, t: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub events: usize,
    pub overruns: usize,
    pub skipped_windows: u64,
}

pub fn event_json(e: &StreamEvent) -> Value {
    let sr = f64::from(CANONICAL_SAMPLE_RATE);
    let probs: Map<String, Value> = e
        .probs
        .labels()
        .iter()
        .zip(e.probs.probs())
        .map(|(k, &p)| (k.clone(), json!(p)))
        .collect();
    json!({
        "t": e.t,
        "window": [e.start as f64 / sr, e.end as f64 / sr],
        "probs": probs,
        "latency_ms": e.latency_ms,
    })
}

pub fn overrun_json(from: u64, to: u64, t: f64) -> Value {
    json!({ "warning": "overrun", "t": t, "skipped_windows": to - from })
}

fn decode(model: &ReneModel, index: u64, start: u64, samples: &[f32]) -> Result<StreamEvent> {
    let began = Instant::now();
    let signal = AudioSignal::new(samples.iter().map(|&v| f64::from(v)).collect(), CANONICAL_SAMPLE_RATE)?;
    let out = model.predict(&signal)?;
    let end = start + samples.len() as u64;
    Ok(StreamEvent {
        index,
        t: end as f64 / f64::from(CANONICAL_SAMPLE_RATE),
        start,
        end,
        probs: out.probs,
        latency_ms: began.elapsed().as_secs_f64() * 1000.0,
    })
}

/// The session's window schedule computed synchronously: every complete,
/// non-overlapping window of the source, decoded in order.
pub fn replay_offline(cfg: &SessionConfig, model: &ReneModel) -> Result<Vec<StreamEvent>> {
    cfg.validate()?;
    let audio = cfg.source.load()?;
    let unit = cfg.unit_samples()?;
    let window = cfg.window_samples()?;
    // Only whole units reach the buffer.
    let usable = audio.len() / unit * unit;
    audio[..usable]
        .chunks_exact(window)
        .enumerate()
        .map(|(k, w)| decode(model, k as u64, (k * window) as u64, w))
        .collect()
}

pub fn run_session<F>(cfg: &SessionConfig, model: &ReneModel, sink: F) -> Result<SessionStats>
where
    F: FnMut(StreamMessage) -> Result<()>,
{
    run_session_observed(cfg, model, |_, _| {}, sink)
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

/// Like [`run_session`], with `observer` shown every window the decoder reads
/// (absolute start, raw samples) before it is decoded.
pub fn run_session_observed<O, F>(cfg: &SessionConfig, model: &ReneModel, mut observer: O, mut sink: F) -> Result<SessionStats>
where
    O: FnMut(u64, &[f32]) + Send,
    F: FnMut(StreamMessage) -> Result<()>,
{
    cfg.validate()?;
    let audio = cfg.source.load()?;
    let unit = cfg.unit_samples()?;
    let window = cfg.window_samples()?;
    let (mut writer, reader) = ring_buffer(cfg.capacity(), unit, CANONICAL_SAMPLE_RATE)?;
    let unit_period = Duration::from_secs_f64(cfg.frame_unit_ms / 1000.0 / cfg.rate_factor);
    let window_period = Duration::from_secs_f64(cfg.window_s / cfg.rate_factor);
    let finished = AtomicBool::new(false);
    let cancelled = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<Result<StreamMessage>>();
    let t0 = Instant::now();

    let mut stats = SessionStats::default();
    let mut sink_result = Ok(());
    thread::scope(|s| {
        let (finished, cancelled) = (&finished, &cancelled);
        s.spawn(move || {
            for (i, chunk) in audio.chunks_exact(unit).enumerate() {
                if cancelled.load(Ordering::Relaxed) {
                    break;
                }
                sleep_until(t0 + unit_period * (i as u32 + 1));
                writer.push(chunk).expect("unit length checked by chunks_exact");
            }
            finished.store(true, Ordering::Release);
        });
        s.spawn(move || {
            let mut consume = || -> Result<()> {
                let w = window as u64;
                let poll = unit_period.clamp(Duration::from_micros(50), Duration::from_millis(5));
                let mut k = 0u64;
                'windows: loop {
                    sleep_until(t0 + window_period * (k as u32 + 1));
                    while reader.cursor() < (k + 1) * w {
                        if cancelled.load(Ordering::Relaxed) {
                            return Ok(());
                        }
                        if finished.load(Ordering::Acquire) && reader.cursor() < (k + 1) * w {
                            return Ok(());
                        }
                        thread::sleep(poll);
                    }
                    let freshest = reader.cursor() / w - 1;
                    if freshest > k && !finished.load(Ordering::Acquire) {
                        let t = (freshest * w) as f64 / f64::from(CANONICAL_SAMPLE_RATE);
                        tx.send(Ok(StreamMessage::Overrun { from: k, to: freshest, t })).ok();
                        k = freshest;
                    }
                    match reader.read_span(k * w, window) {
                        Ok(samples) => {
                            observer(k * w, &samples);
                            let event = decode(model, k, k * w, &samples)?;
                            if tx.send(Ok(StreamMessage::Event(event))).is_err() {
                                return Ok(());
                            }
                        }
                        Err(Error::Overwritten { .. }) => {
                            let to = reader.cursor() / w - 1;
                            let t = (to * w) as f64 / f64::from(CANONICAL_SAMPLE_RATE);
                            tx.send(Ok(StreamMessage::Overrun { from: k, to, t })).ok();
                            k = to;
                            continue 'windows;
                        }
                        Err(e) => return Err(e),
                    }
                    k += 1;
                }
            };
            if let Err(e) = consume() {
                cancelled.store(true, Ordering::Relaxed);
                tx.send(Err(e)).ok();
            }
        });

        for msg in rx {
            let msg = match msg {
                Ok(m) => m,
                Err(e) => {
                    sink_result = Err(e);
                    break;
                }
            };
            match &msg {
                StreamMessage::Event(_) => stats.events += 1,
                StreamMessage::Overrun { from, to, .. } => {
                    stats.overruns += 1;
                    stats.skipped_windows += to - from;
                }
            }
            if let Err(e) = sink(msg) {
                cancelled.store(true, Ordering::Relaxed);
                sink_result = Err(e);
                break;
            }
        }
    });
    sink_result.map(|()| stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset_config, ReneConfig};

    fn tiny_model() -> ReneModel {
        let cfg = ReneConfig {
            whisper_layers: 1,
            whisper_dim: 8,
            whisper_heads: 2,
            conformer_layers: 1,
            conformer_dim: 8,
            conformer_heads: 2,
            bigru_hidden: 32,
            trial_channels: 2,
            ..preset_config("toy").unwrap()
        };
        ReneModel::new(&cfg, 3).unwrap()
    }

    fn tone(seconds: f64) -> Source {
        let n = (seconds * 16000.0) as usize;
        let s = (0..n).map(|i| (i as f64 * 0.05).sin() * 0.2 + ((i * 31) % 97) as f64 * 1e-3).collect();
        Source::Signal(AudioSignal::new(s, 16000).unwrap())
    }

    fn session(source: Source, rate: f64) -> (Vec<StreamMessage>, SessionStats) {
        let cfg = SessionConfig {
            buffer_min: 1.0,
            rate_factor: rate,
            ..SessionConfig::new(source)
        };
        let mut msgs = Vec::new();
        let stats = run_session(&cfg, &tiny_model(), |m| {
            msgs.push(m);
            Ok(())
        })
        .unwrap();
        (msgs, stats)
    }

    fn events(msgs: Vec<StreamMessage>) -> Vec<StreamEvent> {
        msgs.into_iter()
            .map(|m| match m {
                StreamMessage::Event(e) => e,
                other => panic!("unexpected {other:?}"),
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        let ok = SessionConfig::new(tone(0.0));
        assert_eq!(ok.unit_samples().unwrap(), 160);
        assert_eq!(ok.capacity(), 57_600_000);
        ok.validate().unwrap();
        for bad in [
            SessionConfig { window_s: 10.005, ..ok.clone() },
            SessionConfig { buffer_min: 0.1, ..ok.clone() },
            SessionConfig { rate_factor: 0.0, ..ok.clone() },
            SessionConfig { frame_unit_ms: 0.01, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn thirty_five_seconds_gives_three_windows() {
        let (msgs, stats) = session(tone(35.0), 40.0);
        let ev = events(msgs);
        assert_eq!(stats.events, 3);
        let t: Vec<f64> = ev.iter().map(|e| e.t).collect();
        assert_eq!(t, vec![10.0, 20.0, 30.0]);
        for e in &ev {
            assert_eq!(e.end - e.start, 160_000);
            assert!((e.probs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_and_single_window_sources() {
        let (msgs, _) = session(tone(0.0), 100.0);
        assert!(msgs.is_empty());
        let (msgs, _) = session(tone(10.0), 100.0);
        let ev = events(msgs);
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].start, ev[0].end), (0, 160_000));
        assert!(replay_offline(&SessionConfig::new(tone(0.0)), &tiny_model()).unwrap().is_empty());
    }

    #[test]
    fn live_matches_replay_at_any_rate() {
        let source = tone(21.0);
        let model = tiny_model();
        let offline = replay_offline(&SessionConfig::new(source.clone()), &model).unwrap();
        assert_eq!(offline.len(), 2);
        for rate in [10.0, 60.0] {
            let live = events(session(source.clone(), rate).0);
            assert_eq!(live.len(), offline.len());
            for (a, b) in live.iter().zip(&offline) {
                assert_eq!((a.index, a.start, a.end), (b.index, b.start, b.end));
                assert_eq!(a.probs, b.probs);
            }
        }
    }

    #[test]
    fn jsonl_shape() {
        let model = tiny_model();
        let e = &replay_offline(&SessionConfig::new(tone(10.0)), &model).unwrap()[0];
        let v = event_json(e);
        assert_eq!(v["t"], json!(10.0));
        assert_eq!(v["window"], json!([0.0, 10.0]));
        let probs = v["probs"].as_object().unwrap();
        assert_eq!(probs.len(), 2);
        assert!(probs.contains_key("class_0"));
        assert!(v["latency_ms"].as_f64().unwrap() >= 0.0);
        assert_eq!(overrun_json(2, 5, 50.0)["skipped_windows"], json!(3));
    }
}
