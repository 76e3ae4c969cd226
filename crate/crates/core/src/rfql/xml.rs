//! RFQL XML reading and writing.

use std::fmt::Write as _;

use chrono::{NaiveDate, NaiveTime};
use thiserror::Error;

use super::{validate_rfq, RfqDocument, RfqRequest, Violation, TERMS};
use crate::money::Money;

pub const RFQL_NAMESPACE: &str = "urn:ramp:rfql:1";

#[derive(Debug, Error)]
pub enum RfqError {
    #[error("malformed XML at line {line}, column {column}: {message}")]
    Xml {
        line: u32,
        column: u32,
        message: String,
    },
    #[error("line {line}: unexpected element <{name}>")]
    UnknownElement { name: String, line: u32 },
    #[error("line {line}: term {term} appears more than once")]
    DuplicateTerm { term: String, line: u32 },
    #[error("line {line}: invalid value {value:?} for term {term}")]
    BadValue { term: String, value: String, line: u32 },
    #[error("line {line}: missing attribute {attribute:?} on <{element}>")]
    MissingAttribute {
        element: String,
        attribute: String,
        line: u32,
    },
    #[error("validation failed: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Parses and validates an RFQL document.
pub fn parse_rfq(text: &str) -> Result<RfqDocument, RfqError> {
    let xml = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        RfqError::Xml {
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })?;
    let line_of = |node: roxmltree::Node| xml.text_pos_at(node.range().start).row;

    let root = xml.root_element();
    if root.tag_name().name() != "RFQL" {
        return Err(RfqError::UnknownElement {
            name: root.tag_name().name().to_string(),
            line: line_of(root),
        });
    }
    let document_id = root
        .attribute("id")
        .ok_or_else(|| RfqError::MissingAttribute {
            element: "RFQL".into(),
            attribute: "id".into(),
            line: line_of(root),
        })?
        .to_string();

    let mut requests = Vec::new();
    for child in root.children().filter(|n| n.is_element()) {
        if child.tag_name().name() != "Request" {
            return Err(RfqError::UnknownElement {
                name: child.tag_name().name().to_string(),
                line: line_of(child),
            });
        }
        let id = child
            .attribute("id")
            .ok_or_else(|| RfqError::MissingAttribute {
                element: "Request".into(),
                attribute: "id".into(),
                line: line_of(child),
            })?;
        let mut req = RfqRequest {
            id: id.to_string(),
            ..RfqRequest::default()
        };
        let mut seen = [false; TERMS.len()];
        for term in child.children().filter(|n| n.is_element()) {
            let name = term.tag_name().name();
            let idx = TERMS
                .iter()
                .position(|t| *t == name)
                .ok_or_else(|| RfqError::UnknownElement {
                    name: name.to_string(),
                    line: line_of(term),
                })?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(RfqError::DuplicateTerm {
                    term: name.to_string(),
                    line: line_of(term),
                });
            }
            let value = term.text().unwrap_or("").trim();
            set_term(&mut req, name, value).map_err(|()| RfqError::BadValue {
                term: name.to_string(),
                value: value.to_string(),
                line: line_of(term),
            })?;
        }
        requests.push(req);
    }

    let doc = RfqDocument {
        document_id,
        requests,
    };
    let violations = validate_rfq(&doc);
    if violations.is_empty() {
        Ok(doc)
    } else {
        Err(RfqError::Invalid(violations))
    }
}

fn set_term(req: &mut RfqRequest, name: &str, value: &str) -> Result<(), ()> {
    fn num<T: std::str::FromStr>(v: &str) -> Result<T, ()> {
        v.parse().map_err(|_| ())
    }
    fn text(v: &str) -> Result<String, ()> {
        if v.is_empty() {
            Err(())
        } else {
            Ok(v.to_string())
        }
    }
    match name {
        "CPUHourCost" => req.cpu_hour_cost = Some(value.parse::<Money>().map_err(|_| ())?),
        "EndDate" => req.end_date = Some(parse_date(value)?),
        "EndTime" => req.end_time = Some(parse_time(value)?),
        "StartDate" => req.start_date = Some(parse_date(value)?),
        "StartTime" => req.start_time = Some(parse_time(value)?),
        "OperatingSystem" => req.operating_system = Some(text(value)?),
        "OSVersion" => req.os_version = Some(text(value)?),
        "Architecture" => req.architecture = Some(text(value)?),
        "CPUSpeed" => req.cpu_speed = Some(num(value)?),
        "WallTime" => req.wall_time = Some(num(value)?),
        "TotalDiskSpace" => req.total_disk_space = Some(num(value)?),
        "NodeDiskSpace" => req.node_disk_space = Some(num(value)?),
        "InterNodeBandwidth" => req.inter_node_bandwidth = Some(num(value)?),
        "RAMPerCore" => req.ram_per_core = Some(num(value)?),
        "TotalCores" => req.total_cores = Some(num(value)?),
        "NodeCount" => req.node_count = Some(num(value)?),
        "NodeCores" => req.node_cores = Some(num(value)?),
        _ => return Err(()),
    }
    Ok(())
}

fn parse_date(v: &str) -> Result<NaiveDate, ()> {
    NaiveDate::parse_from_str(v.strip_suffix('Z').unwrap_or(v), "%Y-%m-%d").map_err(|_| ())
}

fn parse_time(v: &str) -> Result<NaiveTime, ()> {
    let v = v.strip_suffix('Z').unwrap_or(v);
    NaiveTime::parse_from_str(v, "%H:%M:%S")
        .or_else(|_| NaiveTime::parse_from_str(v, "%H:%M"))
        .map_err(|_| ())
}

/// Writes a document as canonical RFQL: schema element order, two-space
/// indentation, UTC dates and times.
pub fn serialize_rfq(doc: &RfqDocument) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<RFQL xmlns=\"{RFQL_NAMESPACE}\" id=\"{}\">",
        escape(&doc.document_id)
    );
    for req in &doc.requests {
        let _ = writeln!(out, "  <Request id=\"{}\">", escape(&req.id));
        for (term, value) in terms_of(req) {
            let _ = writeln!(out, "    <{term}>{}</{term}>", escape(&value));
        }
        out.push_str("  </Request>\n");
    }
    out.push_str("</RFQL>\n");
    out
}

fn terms_of(req: &RfqRequest) -> Vec<(&'static str, String)> {
    let date = |d: NaiveDate| d.format("%Y-%m-%d").to_string();
    let time = |t: NaiveTime| t.format("%H:%M:%SZ").to_string();
    let mut v: Vec<(&'static str, String)> = Vec::new();
    let mut put = |name: &'static str, value: Option<String>| {
        if let Some(value) = value {
            v.push((name, value));
        }
    };
    put("CPUHourCost", req.cpu_hour_cost.map(|m| m.to_string()));
    put("EndDate", req.end_date.map(date));
    put("EndTime", req.end_time.map(time));
    put("StartDate", req.start_date.map(date));
    put("StartTime", req.start_time.map(time));
    put("OperatingSystem", req.operating_system.clone());
    put("OSVersion", req.os_version.clone());
    put("Architecture", req.architecture.clone());
    put("CPUSpeed", req.cpu_speed.map(|s| s.to_string()));
    put("WallTime", req.wall_time.map(|s| s.to_string()));
    put("TotalDiskSpace", req.total_disk_space.map(|s| s.to_string()));
    put("NodeDiskSpace", req.node_disk_space.map(|s| s.to_string()));
    put("InterNodeBandwidth", req.inter_node_bandwidth.map(|s| s.to_string()));
    put("RAMPerCore", req.ram_per_core.map(|s| s.to_string()));
    put("TotalCores", req.total_cores.map(|s| s.to_string()));
    put("NodeCount", req.node_count.map(|s| s.to_string()));
    put("NodeCores", req.node_cores.map(|s| s.to_string()));
    v
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfql::ViolationKind;

    const EXP1: &str = r#"<?xml version="1.0"?>
<RFQL id="exp1">
  <Request id="0">
    <CPUHourCost>70</CPUHourCost>
    <TotalCores>16</TotalCores>
    <WallTime>3600</WallTime>
    <StartDate>2012-05-01</StartDate>
    <StartTime>10:05:00</StartTime>
    <EndDate>2012-05-02</EndDate>
    <EndTime>10:05:00Z</EndTime>
  </Request>
</RFQL>"#;

    #[test]
    fn parses_single_request() {
        let doc = parse_rfq(EXP1).unwrap();
        assert_eq!(doc.document_id, "exp1");
        assert_eq!(doc.requests.len(), 1);
        let r = &doc.requests[0];
        assert_eq!(r.cpu_hour_cost, Some(Money::from_units(70)));
        assert_eq!(r.total_cores, Some(16));
        assert_eq!(r.wall_time, Some(3600));
    }

    #[test]
    fn total_cores_and_node_count_conflict() {
        let text = EXP1.replace("<TotalCores>16</TotalCores>", "<TotalCores>16</TotalCores><NodeCount>2</NodeCount><NodeCores>8</NodeCores>");
        match parse_rfq(&text) {
            Err(RfqError::Invalid(v)) => {
                assert_eq!(v[0].kind, ViolationKind::MutuallyExclusive);
                assert!(v[0].term.contains("TotalCores"));
                assert!(RfqError::Invalid(v).to_string().contains("mutually exclusive"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_xml_reports_line() {
        let text = "<RFQL id=\"x\">\n  <Request id=\"0\">\n    <CPUHourCost>70</CPUHour>\n</RFQL>";
        match parse_rfq(text) {
            Err(RfqError::Xml { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected xml error, got {other:?}"),
        }
    }

    #[test]
    fn schema_violations_name_the_term() {
        let text = EXP1.replace("<TotalCores>16</TotalCores>", "<TotalCores>sixteen</TotalCores>");
        match parse_rfq(&text) {
            Err(RfqError::BadValue { term, line, .. }) => {
                assert_eq!(term, "TotalCores");
                assert_eq!(line, 5);
            }
            other => panic!("{other:?}"),
        }
        let text = EXP1.replace("<WallTime>", "<GPUCount>1</GPUCount><WallTime>");
        assert!(matches!(parse_rfq(&text), Err(RfqError::UnknownElement { name, .. }) if name == "GPUCount"));
        let text = EXP1.replace("<WallTime>3600</WallTime>", "<WallTime>3600</WallTime><WallTime>1</WallTime>");
        assert!(matches!(parse_rfq(&text), Err(RfqError::DuplicateTerm { .. })));
    }

    #[test]
    fn serialization_is_canonical() {
        let doc = parse_rfq(EXP1).unwrap();
        let xml = serialize_rfq(&doc);
        assert_eq!(xml.matches("<Request ").count(), 1);
        // Schema order: CPUHourCost first, TotalCores after WallTime.
        let p = |t: &str| xml.find(t).unwrap();
        assert!(p("<CPUHourCost>") < p("<EndDate>"));
        assert!(p("<StartTime>") < p("<WallTime>"));
        assert!(p("<WallTime>") < p("<TotalCores>"));
        assert_eq!(parse_rfq(&xml).unwrap(), doc);
    }

    #[test]
    fn multi_request_order_preserved() {
        let mut doc = parse_rfq(EXP1).unwrap();
        for i in 1..3 {
            let mut r = doc.requests[0].clone();
            r.id = i.to_string();
            doc.requests.push(r);
        }
        let xml = serialize_rfq(&doc);
        let ids: Vec<_> = xml
            .match_indices("<Request id=\"")
            .map(|(i, _)| &xml[i + 13..i + 14])
            .collect();
        assert_eq!(ids, ["0", "1", "2"]);
    }

    #[test]
    fn escapes_text() {
        let mut doc = parse_rfq(EXP1).unwrap();
        doc.requests[0].operating_system = Some("Linux <&> \"x\"".into());
        let back = parse_rfq(&serialize_rfq(&doc)).unwrap();
        assert_eq!(back, doc);
    }
}
