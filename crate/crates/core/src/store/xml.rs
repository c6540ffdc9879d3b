//! Provenance XML rendering and parsing.
//!
//! ```xml
//! <provenance artifact="…">
//!   <record run="…" stage="…" plugin="…" version="…" seed="…" user="…" started="…" finished="…">
//!     <input id="…"/>
//!     <param name="…" value="…"/>
//!     <output id="…"/>
//!   </record>
//! </provenance>
//! ```

use std::fmt::Write;

use chrono::{DateTime, SecondsFormat, Utc};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::ProvenanceRecord;
use crate::domain::{ArtifactId, Seed, Timestamp};
use crate::error::{Error, Result};

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            '\t' => out.push_str("&#9;"),
            c => out.push(c),
        }
    }
    out
}

fn fmt_time(t: &Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Canonical XML form of a lineage. Deterministic: equal inputs give equal bytes.
pub fn render_provenance_xml(artifact: &ArtifactId, records: &[ProvenanceRecord]) -> String {
    let mut out = String::new();
    if records.is_empty() {
        let _ = writeln!(out, "<provenance artifact=\"{}\"/>", escape(artifact.as_str()));
        return out;
    }
    let _ = writeln!(out, "<provenance artifact=\"{}\">", escape(artifact.as_str()));
    for r in records {
        let _ = writeln!(
            out,
            "  <record run=\"{}\" stage=\"{}\" plugin=\"{}\" version=\"{}\" seed=\"{}\" user=\"{}\" started=\"{}\" finished=\"{}\">",
            escape(&r.run_id),
            escape(&r.stage),
            escape(&r.plugin_id),
            escape(&r.plugin_version),
            r.seed.0,
            escape(&r.user),
            fmt_time(&r.started_at),
            fmt_time(&r.finished_at),
        );
        for i in &r.input_ids {
            let _ = writeln!(out, "    <input id=\"{}\"/>", escape(i.as_str()));
        }
        for (name, value) in &r.params {
            let _ = writeln!(
                out,
                "    <param name=\"{}\" value=\"{}\"/>",
                escape(name),
                escape(value)
            );
        }
        for o in &r.output_ids {
            let _ = writeln!(out, "    <output id=\"{}\"/>", escape(o.as_str()));
        }
        out.push_str("  </record>\n");
    }
    out.push_str("</provenance>\n");
    out
}

struct Attrs {
    element: String,
    values: Vec<(String, String)>,
}

impl Attrs {
    fn read(e: &BytesStart<'_>) -> Result<Self> {
        let element = String::from_utf8_lossy(e.name().as_ref()).into_owned();
        let mut values = Vec::new();
        for a in e.attributes() {
            let a = a.map_err(|err| Error::Parse(format!("{element}: {err}")))?;
            let key = String::from_utf8_lossy(a.key.as_ref()).into_owned();
            let value = a
                .unescape_value()
                .map_err(|err| Error::Parse(format!("{element}/@{key}: {err}")))?
                .into_owned();
            values.push((key, value));
        }
        Ok(Self { element, values })
    }

    fn req(&self, key: &str) -> Result<&str> {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("{}/@{key}", self.element)))
    }

    fn id(&self, key: &str) -> Result<ArtifactId> {
        self.req(key)?
            .parse()
            .map_err(|_| Error::Parse(format!("{}/@{key}", self.element)))
    }

    fn time(&self, key: &str) -> Result<Timestamp> {
        DateTime::parse_from_rfc3339(self.req(key)?)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|_| Error::Parse(format!("{}/@{key}", self.element)))
    }
}

fn start_record(a: &Attrs) -> Result<ProvenanceRecord> {
    Ok(ProvenanceRecord {
        run_id: a.req("run")?.to_string(),
        stage: a.req("stage")?.to_string(),
        plugin_id: a.req("plugin")?.to_string(),
        plugin_version: a.req("version")?.to_string(),
        seed: Seed(
            a.req("seed")?
                .parse()
                .map_err(|_| Error::Parse("record/@seed".into()))?,
        ),
        user: a.req("user")?.to_string(),
        started_at: a.time("started")?,
        finished_at: a.time("finished")?,
        params: Vec::new(),
        input_ids: Vec::new(),
        output_ids: Vec::new(),
    })
}

fn record_child(record: &mut ProvenanceRecord, a: &Attrs) -> Result<()> {
    match a.element.as_str() {
        "input" => record.input_ids.push(a.id("id")?),
        "output" => record.output_ids.push(a.id("id")?),
        "param" => record
            .params
            .push((a.req("name")?.to_string(), a.req("value")?.to_string())),
        other => return Err(Error::Parse(format!("record/{other}"))),
    }
    Ok(())
}

/// Parses a provenance document into its artifact id and oldest-first records.
pub fn parse_provenance_xml(doc: &str) -> Result<(ArtifactId, Vec<ProvenanceRecord>)> {
    let mut reader = Reader::from_str(doc);
    let mut artifact: Option<ArtifactId> = None;
    let mut records = Vec::new();
    let mut current: Option<ProvenanceRecord> = None;
    let mut closed = false;

    loop {
        let event = reader
            .read_event()
            .map_err(|e| Error::Parse(format!("xml at byte {}: {e}", reader.buffer_position())))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let empty = matches!(event, Event::Empty(_));
                let a = Attrs::read(e)?;
                if closed {
                    return Err(Error::Parse(format!("{} after provenance", a.element)));
                }
                match (a.element.as_str(), artifact.is_some(), current.is_some()) {
                    ("provenance", false, _) => {
                        artifact = Some(a.id("artifact")?);
                        closed = empty;
                    }
                    ("record", true, false) => {
                        let r = start_record(&a)?;
                        if empty {
                            records.push(r);
                        } else {
                            current = Some(r);
                        }
                    }
                    (_, true, true) if empty => {
                        record_child(current.as_mut().expect("inside record"), &a)?
                    }
                    (other, _, _) => return Err(Error::Parse(format!("unexpected element {other}"))),
                }
            }
            Event::End(ref e) => match e.name().as_ref() {
                b"record" => match current.take() {
                    Some(r) => records.push(r),
                    None => return Err(Error::Parse("unbalanced </record>".into())),
                },
                b"provenance" => closed = true,
                other => {
                    return Err(Error::Parse(format!(
                        "unexpected </{}>",
                        String::from_utf8_lossy(other)
                    )))
                }
            },
            Event::Eof => break,
            Event::Text(ref t) => {
                let raw = String::from_utf8_lossy(t.as_ref()).into_owned();
                if !raw.trim().is_empty() {
                    return Err(Error::Parse("unexpected text content".into()));
                }
            }
            Event::Decl(_) | Event::Comment(_) => {}
            _ => return Err(Error::Parse("unsupported xml construct".into())),
        }
    }

    match (artifact, closed, current) {
        (Some(a), true, None) => Ok((a, records)),
        (None, _, _) => Err(Error::Parse("provenance".into())),
        _ => Err(Error::Parse("provenance: document truncated".into())),
    }
}
