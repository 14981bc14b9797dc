//! Per-episode metrics (CSV) and step-level dialogue transcripts (JSONL),
//! flushed once per episode so interrupted runs keep their prefix.

use serde::Serialize;
use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Sliding-window mean over the last `cap` values; partial windows average
/// what is available.
#[derive(Clone, Debug)]
pub struct MovingAverage {
    cap: usize,
    window: VecDeque<f64>,
    sum: f64,
}

impl MovingAverage {
    pub fn new(cap: usize) -> Self {
        MovingAverage { cap, window: VecDeque::with_capacity(cap), sum: 0.0 }
    }

    pub fn push(&mut self, v: f64) -> f64 {
        if self.window.len() == self.cap {
            self.sum -= self.window.pop_front().unwrap();
        }
        self.window.push_back(v);
        self.sum += v;
        self.value()
    }

    pub fn value(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.sum / self.window.len() as f64
        }
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.cap
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "episode,return,length,ma100,loss_a,loss_q,syntax_err_rate")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn row(
        &mut self,
        episode: usize,
        ep_return: f64,
        length: usize,
        ma100: f64,
        loss_a: Option<f64>,
        loss_q: Option<f64>,
        syntax_err_rate: Option<f64>,
    ) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{episode},{ep_return},{length},{ma100},{},{},{}",
            opt(loss_a),
            opt(loss_q),
            opt(syntax_err_rate)
        )?;
        self.out.flush()
    }
}

/// One transcript line: the dialogue and transition at a single step.
/// Question fields are null for the question-free baseline.
#[derive(Debug, Serialize)]
pub struct TranscriptRecord {
    pub episode: usize,
    pub t: usize,
    pub question: Option<String>,
    pub verdict: Option<&'static str>,
    pub eta: Option<[u8; 2]>,
    pub r_q: Option<f32>,
    pub action: usize,
    pub r_e: f32,
    pub done: bool,
}

pub struct TranscriptWriter {
    out: BufWriter<File>,
}

impl TranscriptWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(TranscriptWriter { out: BufWriter::new(File::create(path)?) })
    }

    pub fn record(&mut self, rec: &TranscriptRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(rec).expect("transcript serialization cannot fail");
        writeln!(self.out, "{line}")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_window_semantics() {
        let mut ma = MovingAverage::new(100);
        for i in 1..=100 {
            ma.push(i as f64);
        }
        assert!(ma.is_full());
        assert_eq!(ma.value(), 50.5, "mean of 1..=100");
        ma.push(101.0);
        assert_eq!(ma.value(), 51.5, "window slides");
    }

    #[test]
    fn partial_window_averages_available_values() {
        let mut ma = MovingAverage::new(100);
        assert_eq!(ma.push(2.0), 2.0);
        assert_eq!(ma.push(4.0), 3.0);
        assert!(!ma.is_full());
    }

    #[test]
    fn metrics_rows_and_empty_fields() {
        let dir = std::env::temp_dir().join("gridqa-metrics-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.row(1, 0.55, 40, 0.55, Some(1.25), None, None).unwrap();
        w.row(2, 0.0, 80, 0.275, Some(-0.5), Some(0.125), Some(0.1)).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "episode,return,length,ma100,loss_a,loss_q,syntax_err_rate");
        assert_eq!(lines[1], "1,0.55,40,0.55,1.25,,");
        assert_eq!(lines[2], "2,0,80,0.275,-0.5,0.125,0.1");
    }

    #[test]
    fn transcript_lines_are_json() {
        let dir = std::env::temp_dir().join("gridqa-metrics-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.jsonl");
        let mut w = TranscriptWriter::create(&path).unwrap();
        w.record(&TranscriptRecord {
            episode: 1,
            t: 0,
            question: Some("green goal is north".to_string()),
            verdict: Some("True"),
            eta: Some([1, 1]),
            r_q: Some(0.2),
            action: 2,
            r_e: 0.0,
            done: false,
        })
        .unwrap();
        w.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["question"], "green goal is north");
        assert_eq!(v["eta"][0], 1);
    }
}
