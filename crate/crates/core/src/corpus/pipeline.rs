use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dedup::Deduplicator;
use super::filter::{CleaningConfig, DropReason, FilterDecision, SentenceFilter};
use super::langid::LanguageScorer;
use super::split::split_sentences;
use super::CorpusError;

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub source: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanSentence {
    pub text: String,
    pub lang_score: f64,
    pub source: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub short: u64,
    pub banned: u64,
    pub language: u64,
    pub duplicate: u64,
}

impl DropCounts {
    pub fn total(&self) -> u64 {
        self.short + self.banned + self.language + self.duplicate
    }

    fn record(&mut self, r: DropReason) {
        match r {
            DropReason::Short => self.short += 1,
            DropReason::Banned => self.banned += 1,
            DropReason::Language => self.language += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub documents: u64,
    pub sentences: u64,
    pub kept: u64,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub dropped: DropCounts,
}

/// Byte sizes count document text before and kept sentence text after
/// cleaning, without line terminators.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: u64,
    pub sentences: u64,
    pub kept: u64,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub dropped: DropCounts,
    pub per_source: BTreeMap<String, SourceStats>,
}

impl CorpusStats {
    pub fn reconciles(&self) -> bool {
        self.kept + self.dropped.total() == self.sentences && self.bytes_after <= self.bytes_before
    }
}

/// Pipeline failure together with the statistics of the prefix processed
/// before it.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct PipelineAbort {
    #[source]
    pub error: CorpusError,
    pub stats: CorpusStats,
}

/// Incremental cleaner. Documents are split and filtered in parallel per
/// chunk; dedup and statistics are merged serially in input order.
pub struct Cleaner<'a> {
    filter: SentenceFilter,
    scorer: &'a dyn LanguageScorer,
    dedup: Deduplicator,
    ids: HashSet<String>,
    stats: CorpusStats,
}

impl<'a> Cleaner<'a> {
    pub fn new(cfg: &CleaningConfig, scorer: &'a dyn LanguageScorer) -> Result<Self, CorpusError> {
        Ok(Cleaner {
            filter: SentenceFilter::new(cfg)?,
            scorer,
            dedup: Deduplicator::new(),
            ids: HashSet::new(),
            stats: CorpusStats::default(),
        })
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn into_stats(self) -> CorpusStats {
        self.stats
    }

    /// Validates the whole chunk before touching any state, so an invalid
    /// document leaves the statistics at the previous chunk boundary.
    pub fn process(&mut self, docs: &[RawDocument]) -> Result<Vec<CleanSentence>, CorpusError> {
        let mut fresh = HashSet::new();
        for d in docs {
            if d.text.is_empty() {
                return Err(CorpusError::Document { id: d.id.clone(), msg: "empty text".into() });
            }
            if self.ids.contains(&d.id) || !fresh.insert(d.id.as_str()) {
                return Err(CorpusError::Document { id: d.id.clone(), msg: "duplicate document id".into() });
            }
        }
        let filter = &self.filter;
        let scorer = self.scorer;
        let decided: Vec<Vec<(String, FilterDecision)>> = docs
            .par_iter()
            .map(|d| {
                split_sentences(&d.text)
                    .into_iter()
                    .map(|s| {
                        let decision = filter.decide(&s, scorer);
                        (s, decision)
                    })
                    .collect()
            })
            .collect();

        let mut out = Vec::new();
        for (d, sentences) in docs.iter().zip(decided) {
            self.ids.insert(d.id.clone());
            let src = self.stats.per_source.entry(d.source.clone()).or_default();
            src.documents += 1;
            src.bytes_before += d.text.len() as u64;
            self.stats.documents += 1;
            self.stats.bytes_before += d.text.len() as u64;
            for (s, decision) in sentences {
                src.sentences += 1;
                self.stats.sentences += 1;
                match decision {
                    FilterDecision::Drop(r) => {
                        src.dropped.record(r);
                        self.stats.dropped.record(r);
                    }
                    FilterDecision::Keep { .. } if self.filter.config().dedup && !self.dedup.admit(&s) => {
                        src.dropped.duplicate += 1;
                        self.stats.dropped.duplicate += 1;
                    }
                    FilterDecision::Keep { lang_score } => {
                        src.kept += 1;
                        src.bytes_after += s.len() as u64;
                        self.stats.kept += 1;
                        self.stats.bytes_after += s.len() as u64;
                        out.push(CleanSentence { text: s, lang_score, source: d.source.clone() });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Cleans an in-memory document list.
pub fn clean_documents(
    docs: &[RawDocument],
    cfg: &CleaningConfig,
    scorer: &dyn LanguageScorer,
) -> Result<(Vec<CleanSentence>, CorpusStats), CorpusError> {
    let mut c = Cleaner::new(cfg, scorer)?;
    let mut out = Vec::new();
    for chunk in docs.chunks(CHUNK) {
        out.extend(c.process(chunk)?);
    }
    Ok((out, c.into_stats()))
}

/// Reads JSON-lines documents. Blank lines are skipped; malformed lines
/// report the byte offset of the problem within the stream.
pub fn read_documents<R: BufRead>(reader: R, name: &str) -> impl Iterator<Item = Result<RawDocument, CorpusError>> + '_
where
    R: 'static,
{
    let name = name.to_string();
    let mut offset = 0usize;
    let mut lineno = 0usize;
    reader.split(b'\n').filter_map(move |line| {
        lineno += 1;
        let line = match line {
            Ok(l) => l,
            Err(source) => return Some(Err(CorpusError::Io { path: name.clone(), source })),
        };
        let start = offset;
        offset += line.len() + 1;
        let text = match std::str::from_utf8(&line) {
            Ok(t) => t,
            Err(e) => return Some(Err(CorpusError::InvalidUtf8 { offset: start + e.valid_up_to() })),
        };
        if text.trim().is_empty() {
            return None;
        }
        Some(serde_json::from_str(text).map_err(|e| CorpusError::Json { line: lineno, msg: e.to_string() }))
    })
}

/// Streams documents through the cleaner, writing one sentence per line.
pub fn run_pipeline<I, W>(
    docs: I,
    cfg: &CleaningConfig,
    scorer: &dyn LanguageScorer,
    out: &mut W,
    out_name: &str,
) -> Result<CorpusStats, PipelineAbort>
where
    I: IntoIterator<Item = Result<RawDocument, CorpusError>>,
    W: Write,
{
    let mut cleaner = match Cleaner::new(cfg, scorer) {
        Ok(c) => c,
        Err(error) => return Err(PipelineAbort { error, stats: CorpusStats::default() }),
    };
    let io = |source| CorpusError::Io { path: out_name.to_string(), source };
    let mut iter = docs.into_iter();
    loop {
        let mut chunk = Vec::with_capacity(CHUNK);
        let mut pending_err = None;
        for d in iter.by_ref() {
            match d {
                Ok(d) => chunk.push(d),
                Err(e) => {
                    pending_err = Some(e);
                    break;
                }
            }
            if chunk.len() == CHUNK {
                break;
            }
        }
        let done = chunk.is_empty() && pending_err.is_none();
        let written = cleaner.process(&chunk).and_then(|kept| {
            for s in kept {
                writeln!(out, "{}", s.text).map_err(io)?;
            }
            Ok(())
        });
        if let Err(error) = written.and_then(|_| pending_err.map_or(Ok(()), Err)) {
            return Err(PipelineAbort { error, stats: cleaner.into_stats() });
        }
        if done || chunk.len() < CHUNK {
            break;
        }
    }
    if let Err(e) = out.flush() {
        return Err(PipelineAbort { error: io(e), stats: cleaner.into_stats() });
    }
    Ok(cleaner.into_stats())
}

/// File-level driver: JSON-lines in, text corpus out, optional stats JSON.
/// On abort the stats file still receives the processed prefix.
pub fn clean_file(
    input: &Path,
    output: &Path,
    stats_path: Option<&Path>,
    cfg: &CleaningConfig,
    scorer: &dyn LanguageScorer,
) -> Result<CorpusStats, PipelineAbort> {
    let abort = |error| PipelineAbort { error, stats: CorpusStats::default() };
    let in_name = input.display().to_string();
    let out_name = output.display().to_string();
    let reader = File::open(input).map_err(|source| abort(CorpusError::Io { path: in_name.clone(), source }))?;
    let writer = File::create(output).map_err(|source| abort(CorpusError::Io { path: out_name.clone(), source }))?;
    let mut writer = BufWriter::new(writer);
    let result = run_pipeline(read_documents(BufReader::new(reader), &in_name), cfg, scorer, &mut writer, &out_name);
    drop(writer);
    if let Some(p) = stats_path {
        let stats = match &result {
            Ok(s) => s,
            Err(a) => &a.stats,
        };
        let json = serde_json::to_string_pretty(stats).expect("stats serialize");
        if let Err(source) = std::fs::write(p, json + "\n") {
            let error = CorpusError::Io { path: p.display().to_string(), source };
            return Err(PipelineAbort { error, stats: result.map_or_else(|a| a.stats, |s| s) });
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    struct AllTarget;
    impl LanguageScorer for AllTarget {
        fn score(&self, _: &str) -> f64 {
            1.0
        }
    }

    fn doc(id: &str, text: &str) -> RawDocument {
        RawDocument { id: id.into(), source: "news".into(), text: text.into() }
    }

    #[test]
    fn empty_stream() {
        let mut out = Vec::new();
        let stats = run_pipeline(Vec::new(), &CleaningConfig::default(), &AllTarget, &mut out, "mem").unwrap();
        assert!(out.is_empty());
        assert_eq!(stats, CorpusStats::default());
    }

    #[test]
    fn counts_reconcile() {
        let docs = vec![
            doc("1", "one two three four five. too short. one two three four five."),
            doc("2", "a b c d e f <div> g. x y z w v u."),
        ];
        let (kept, s) = clean_documents(&docs, &CleaningConfig::default(), &AllTarget).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(s.sentences, 5);
        assert_eq!(s.dropped, DropCounts { short: 1, banned: 1, language: 0, duplicate: 1 });
        assert!(s.reconciles());
        assert_eq!(s.per_source["news"].documents, 2);
    }

    #[test]
    fn duplicate_ids_and_empty_text_rejected() {
        let cfg = CleaningConfig::default();
        assert!(clean_documents(&[doc("1", "x"), doc("1", "y")], &cfg, &AllTarget).is_err());
        assert!(clean_documents(&[doc("1", "")], &cfg, &AllTarget).is_err());
    }

    #[test]
    fn abort_keeps_prefix_stats() {
        let docs: Vec<Result<RawDocument, CorpusError>> = (0..CHUNK)
            .map(|i| Ok(doc(&i.to_string(), "one two three four five.")))
            .chain([Err(CorpusError::Json { line: 300, msg: "bad".into() })])
            .collect();
        let mut out = Vec::new();
        let err = run_pipeline(docs, &CleaningConfig::default(), &AllTarget, &mut out, "mem").unwrap_err();
        assert_eq!(err.stats.documents, CHUNK as u64);
        assert!(err.to_string().contains("300"));
    }

    #[test]
    fn jsonl_reader_reports_offsets() {
        let data = b"{\"id\":\"a\",\"source\":\"s\",\"text\":\"t\"}\n\n{\"id\":\"b\",\"source\":\"s\",\"text\":\"\xff\"}\n".to_vec();
        let bad = data.iter().position(|&b| b == 0xff).unwrap();
        assert_eq!(bad, 67);
        let items: Vec<_> = read_documents(std::io::Cursor::new(data), "mem").collect();
        assert_eq!(items.len(), 2);
        assert!(items[0].is_ok());
        assert!(matches!(items[1], Err(CorpusError::InvalidUtf8 { offset: 67 })));
    }
}
