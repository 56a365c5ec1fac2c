use std::collections::HashMap;

use super::HarnessError;
use crate::corpus::{read_queries, read_triples, DataLayout, TripleSpec};
use crate::rng::StreamRng;
use crate::store::{DocStore, IdTable};

/// Queries, triples and the id universe for negative sampling.
pub struct Workload {
    queries: HashMap<Box<[u8]>, Box<str>>,
    triples: Vec<TripleSpec>,
    doc_ids: IdTable,
}

impl Workload {
    /// Loads queries and triples from `layout` and takes the id universe from
    /// `store`. Every triple must resolve.
    pub fn load(layout: &DataLayout, store: &impl DocStore) -> Result<Self, HarnessError> {
        let queries = read_queries(layout.queries())?
            .into_iter()
            .map(|q| (Box::from(q.id.as_bytes()), q.text.into_boxed_str()))
            .collect();
        Self::new(queries, read_triples(layout.triples())?, store.doc_ids()?)
    }

    pub fn new(
        queries: HashMap<Box<[u8]>, Box<str>>,
        triples: Vec<TripleSpec>,
        doc_ids: IdTable,
    ) -> Result<Self, HarnessError> {
        if triples.is_empty() {
            return Err(HarnessError::EmptyWorkload("no triples".into()));
        }
        if doc_ids.is_empty() {
            return Err(HarnessError::EmptyWorkload("no documents".into()));
        }
        for (i, t) in triples.iter().enumerate() {
            let missing = if !queries.contains_key(t.query_id.as_bytes()) {
                Some(("query", t.query_id.as_bytes()))
            } else if !doc_ids.contains(t.positive_doc_id.as_bytes()) {
                Some(("document", t.positive_doc_id.as_bytes()))
            } else {
                None
            };
            if let Some((what, id)) = missing {
                return Err(HarnessError::UnresolvedTriple {
                    line: i + 1,
                    detail: format!("unknown {what} id {:?}", String::from_utf8_lossy(id)),
                });
            }
        }
        Ok(Self {
            queries,
            triples,
            doc_ids,
        })
    }

    pub fn triples(&self) -> &[TripleSpec] {
        &self.triples
    }

    pub fn doc_ids(&self) -> &IdTable {
        &self.doc_ids
    }

    pub fn query_text(&self, id: &[u8]) -> Option<&str> {
        self.queries.get(id).map(|q| &**q)
    }
}

/// One drawn training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampledTriple<'a> {
    pub query_id: &'a [u8],
    pub positive_id: &'a [u8],
    pub negative_id: &'a [u8],
}

/// Draws a triple uniformly and a negative uniformly from the documents other
/// than its positive.
pub fn sample_triple<'a>(
    rng: &mut StreamRng,
    triples: &'a [TripleSpec],
    doc_ids: &'a IdTable,
) -> Result<SampledTriple<'a>, HarnessError> {
    if triples.is_empty() {
        return Err(HarnessError::EmptyWorkload("no triples".into()));
    }
    if doc_ids.is_empty() {
        return Err(HarnessError::EmptyWorkload("no documents".into()));
    }
    let t = &triples[rng.index(triples.len())];
    let positive = t.positive_doc_id.as_bytes();
    if doc_ids.len() == 1 && doc_ids.get(0) == positive {
        return Err(HarnessError::SingleDocCorpus);
    }
    let negative = loop {
        let candidate = doc_ids.get(rng.index(doc_ids.len()));
        if candidate != positive {
            break candidate;
        }
    };
    Ok(SampledTriple {
        query_id: t.query_id.as_bytes(),
        positive_id: positive,
        negative_id: negative,
    })
}
