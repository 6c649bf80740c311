//! Reader and writer for the annotation XML format (see
//! `docs/annotation_schema.md`).
//!
//! ```xml
//! <Annotations wsi_id="wsi_00">
//!   <Annotation id="roi_0001" wsi_id="wsi_00" label="neuritic_plaque" closed="true">
//!     <Vertices>
//!       <Vertex x="1204.5" y="880"/>
//!       ...
//!     </Vertices>
//!   </Annotation>
//! </Annotations>
//! ```

use std::fmt::Write as _;

use super::{AnnotationError, Point, PolygonRoi, DEFAULT_LABEL};
use crate::wsi::WsiRecord;

pub fn parse_annotation_file(xml_text: &str, wsi: &WsiRecord) -> Result<Vec<PolygonRoi>, AnnotationError> {
    let doc = roxmltree::Document::parse(xml_text).map_err(|e| AnnotationError::MalformedXml(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "Annotations" {
        return Err(AnnotationError::SchemaViolation {
            roi_id: String::new(),
            reason: format!("root element is <{}>, expected <Annotations>", root.tag_name().name()),
        });
    }
    let root_wsi = root.attribute("wsi_id");
    let extent = wsi.level_dimensions.first().copied();

    let mut rois = Vec::new();
    for (index, node) in root.children().filter(|n| n.is_element()).enumerate() {
        let roi_id = node
            .attribute("id")
            .map(str::to_string)
            .unwrap_or_else(|| format!("<annotation #{index}>"));
        let violation = |reason: String| AnnotationError::SchemaViolation {
            roi_id: roi_id.clone(),
            reason,
        };
        if node.tag_name().name() != "Annotation" {
            return Err(violation(format!("unexpected element <{}>", node.tag_name().name())));
        }
        if node.attribute("id").is_none() {
            return Err(violation("missing `id` attribute".into()));
        }
        let wsi_id = node
            .attribute("wsi_id")
            .or(root_wsi)
            .ok_or_else(|| violation("no wsi_id on annotation or root".into()))?;
        if wsi_id != wsi.wsi_id {
            return Err(violation(format!("belongs to {wsi_id}, expected {}", wsi.wsi_id)));
        }
        let closed = match node.attribute("closed") {
            None | Some("true") | Some("1") => true,
            Some("false") | Some("0") => false,
            Some(other) => return Err(violation(format!("bad `closed` value `{other}`"))),
        };
        let vertex_list = node
            .children()
            .find(|n| n.has_tag_name("Vertices"))
            .ok_or_else(|| violation("missing <Vertices>".into()))?;
        let mut vertices = Vec::new();
        for v in vertex_list.children().filter(|n| n.is_element()) {
            if !v.has_tag_name("Vertex") {
                return Err(violation(format!("unexpected <{}> in <Vertices>", v.tag_name().name())));
            }
            let coord = |name: &str| -> Result<f64, AnnotationError> {
                let raw = v
                    .attribute(name)
                    .ok_or_else(|| violation(format!("vertex {} missing `{name}`", vertices.len())))?;
                raw.trim()
                    .parse::<f64>()
                    .map_err(|_| violation(format!("vertex {} has bad {name} `{raw}`", vertices.len())))
            };
            vertices.push(Point::new(coord("x")?, coord("y")?));
        }
        // an explicit closing vertex is redundant
        if vertices.len() > 3 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        let mut roi = PolygonRoi {
            roi_id: roi_id.clone(),
            wsi_id: wsi_id.to_string(),
            label: node.attribute("label").unwrap_or(DEFAULT_LABEL).to_string(),
            vertices,
            closed,
        };
        roi.validate(extent)?;
        roi.canonicalize();
        rois.push(roi);
    }
    Ok(rois)
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

/// Serializes ROIs in the documented schema. Coordinates use Rust's
/// shortest round-trip float formatting, so parsing the output yields
/// bit-identical vertices.
pub fn write_annotation_file(wsi_id: &str, rois: &[PolygonRoi]) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(out, "<Annotations wsi_id=\"{}\">", escape(wsi_id));
    for roi in rois {
        let _ = writeln!(
            out,
            "  <Annotation id=\"{}\" wsi_id=\"{}\" label=\"{}\" closed=\"{}\">",
            escape(&roi.roi_id),
            escape(&roi.wsi_id),
            escape(&roi.label),
            roi.closed
        );
        out.push_str("    <Vertices>\n");
        for v in &roi.vertices {
            let _ = writeln!(out, "      <Vertex x=\"{}\" y=\"{}\"/>", v.x, v.y);
        }
        out.push_str("    </Vertices>\n  </Annotation>\n");
    }
    out.push_str("</Annotations>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wsi::Scanner;
    use proptest::prelude::*;

    fn wsi() -> WsiRecord {
        WsiRecord {
            wsi_id: "wsi_00".into(),
            image_path: "wsi_00".into(),
            scanner: Scanner::NanoZoomer2RS,
            resolution_nm_per_px: 227.0,
            base_magnification: 40.0,
            level_count: 2,
            level_dimensions: vec![(1000, 800), (500, 400)],
        }
    }

    fn annotation(id: &str, pts: &[(f64, f64)]) -> String {
        let verts: String = pts.iter().map(|(x, y)| format!("<Vertex x=\"{x}\" y=\"{y}\"/>")).collect();
        format!("<Annotation id=\"{id}\" label=\"neuritic_plaque\"><Vertices>{verts}</Vertices></Annotation>")
    }

    fn doc(body: &str) -> String {
        format!("<Annotations wsi_id=\"wsi_00\">{body}</Annotations>")
    }

    #[test]
    fn two_annotations_parse() {
        let square = [(10.0, 10.0), (20.0, 10.0), (20.0, 20.0), (10.0, 20.0)];
        let xml = doc(&(annotation("a", &square) + &annotation("b", &square)));
        let rois = parse_annotation_file(&xml, &wsi()).unwrap();
        assert_eq!(rois.len(), 2);
        assert!(rois.iter().all(|r| r.vertices.len() == 4));
        assert_eq!(rois[1].roi_id, "b");
        assert_eq!(rois[0].wsi_id, "wsi_00");
    }

    #[test]
    fn two_vertices_rejected_with_roi_id() {
        let xml = doc(&annotation("short", &[(1.0, 1.0), (5.0, 5.0)]));
        match parse_annotation_file(&xml, &wsi()) {
            Err(AnnotationError::SchemaViolation { roi_id, .. }) => assert_eq!(roi_id, "short"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_and_schema_errors() {
        assert!(matches!(parse_annotation_file("<Annotations>", &wsi()), Err(AnnotationError::MalformedXml(_))));
        let no_vertices = doc("<Annotation id=\"x\"/>");
        assert!(matches!(parse_annotation_file(&no_vertices, &wsi()), Err(AnnotationError::SchemaViolation { .. })));
        let bad_coord = doc("<Annotation id=\"x\"><Vertices><Vertex x=\"a\" y=\"1\"/></Vertices></Annotation>");
        assert!(matches!(parse_annotation_file(&bad_coord, &wsi()), Err(AnnotationError::SchemaViolation { .. })));
        let dup = doc(&annotation("d", &[(1.0, 1.0), (1.0, 1.0), (5.0, 5.0), (1.0, 6.0)]));
        assert!(matches!(parse_annotation_file(&dup, &wsi()), Err(AnnotationError::SchemaViolation { .. })));
        let other_slide = "<Annotations wsi_id=\"wsi_99\"><Annotation id=\"z\"><Vertices/></Annotation></Annotations>";
        assert!(matches!(parse_annotation_file(other_slide, &wsi()), Err(AnnotationError::SchemaViolation { .. })));
    }

    #[test]
    fn out_of_bounds_names_roi() {
        let xml = doc(&annotation("far", &[(10.0, 10.0), (1200.0, 10.0), (20.0, 30.0)]));
        match parse_annotation_file(&xml, &wsi()) {
            Err(AnnotationError::OutOfBounds { roi_id, x, .. }) => {
                assert_eq!(roi_id, "far");
                assert_eq!(x, 1200.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degenerate_rejected() {
        let xml = doc(&annotation("flat", &[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]));
        assert!(matches!(parse_annotation_file(&xml, &wsi()), Err(AnnotationError::DegeneratePolygon { .. })));
    }

    #[test]
    fn clockwise_input_is_canonicalized() {
        let cw = [(10.0, 10.0), (10.0, 20.0), (20.0, 20.0), (20.0, 10.0)];
        let rois = parse_annotation_file(&doc(&annotation("cw", &cw)), &wsi()).unwrap();
        assert!(super::super::signed_area(&rois[0].vertices) > 0.0);
        assert_eq!(rois[0].vertices[0], Point::new(10.0, 10.0));
        assert_eq!(rois[0].vertices[1], Point::new(20.0, 10.0));
    }

    #[test]
    fn closing_vertex_dropped() {
        let pts = [(10.0, 10.0), (20.0, 10.0), (20.0, 20.0), (10.0, 10.0)];
        let rois = parse_annotation_file(&doc(&annotation("c", &pts)), &wsi()).unwrap();
        assert_eq!(rois[0].vertices.len(), 3);
    }

    #[test]
    fn special_characters_survive() {
        let mut roi = PolygonRoi::new("a&b<\"c\">", "wsi_00", vec![Point::new(1.0, 1.0), Point::new(9.0, 1.0), Point::new(5.0, 7.0)]);
        roi.label = "plaque 'diffuse'".into();
        let back = parse_annotation_file(&write_annotation_file("wsi_00", &[roi.clone()]), &wsi()).unwrap();
        assert_eq!(back, vec![roi]);
    }

    proptest! {
        #[test]
        fn writer_output_round_trips(
            polys in proptest::collection::vec(
                (3usize..12, 5.0f64..200.0, 250.0f64..750.0, 250.0f64..550.0, any::<u64>()), 1..6)
        ) {
            let rois: Vec<PolygonRoi> = polys.iter().enumerate().map(|(i, &(n, r, cx, cy, salt))| {
                let verts = (0..n).map(|k| {
                    let jitter = ((salt >> (k % 32)) & 0xff) as f64 / 255.0 * 0.5;
                    let t = std::f64::consts::TAU * (k as f64 + jitter) / n as f64;
                    let rad = r * (0.6 + 0.4 * (((salt >> (k * 3 % 48)) & 0x7) as f64 / 7.0));
                    Point::new(cx + rad * t.cos(), cy + rad * t.sin())
                }).collect();
                let mut roi = PolygonRoi::new(format!("roi_{i:04}"), "wsi_00", verts);
                roi.canonicalize();
                roi
            }).collect();
            let parsed = parse_annotation_file(&write_annotation_file("wsi_00", &rois), &wsi()).unwrap();
            prop_assert_eq!(parsed, rois);
        }
    }
}
