//! Test worker that speaks the broker protocol without running any code.
//!
//! The program text is scanned for directive lines of the form
//! `#stub: <verb> [argument]`, which stay valid Python comments:
//!
//! | verb | effect |
//! |------|--------|
//! | `print TEXT` | write `TEXT` as a stdout line |
//! | `stderr TEXT` | write `TEXT` as a stderr line |
//! | `sleep MS` | sleep; overrunning the task timeout reports `timeout` |
//! | `hang` | ignore the timeout and block forever |
//! | `exit CODE` | stop; nonzero codes report `exec_error` |
//! | `crash` | terminate the worker process without answering |
//! | `garbage` | answer with a line that is not JSON |
//! | `tag TEXT` | add a PNG text chunk to the rendered image |
//! | `size WxH` | rendered image dimensions (default 64x48) |
//! | `colors N` | number of palette colors in the rendered image |
//! | `noimage` | render tasks produce no image.png |
//! | `badimage` | render tasks produce an undecodable image.png |
//! | `probe TOKEN` | write a sentinel file in the task directory, read it back, print `clean` or `contaminated` |
//!
//! Every rendered image also carries a `source` text chunk with a digest of
//! the program, so distinct programs render to distinct images.

use std::io::{self, BufRead, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use base64::Engine as _;
use sha2::{Digest, Sha256};

use super::protocol::{TaskKind, WireRequest, WireResponse};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Print(String),
    Stderr(String),
    Sleep(u64),
    Hang,
    Exit(i32),
    Crash,
    Garbage,
    Tag(String),
    Size(u32, u32),
    Colors(u32),
    NoImage,
    BadImage,
    Probe(String),
}

/// Extracts directives in program order. Unknown verbs are ignored.
pub fn parse_directives(code: &str) -> Vec<Directive> {
    code.lines()
        .filter_map(|line| line.trim_start().strip_prefix("#stub:"))
        .filter_map(|rest| {
            let rest = rest.trim();
            let (verb, arg) = rest.split_once(' ').unwrap_or((rest, ""));
            let arg = arg.trim();
            Some(match verb {
                "print" => Directive::Print(arg.to_string()),
                "stderr" => Directive::Stderr(arg.to_string()),
                "sleep" => Directive::Sleep(arg.parse().ok()?),
                "hang" => Directive::Hang,
                "exit" => Directive::Exit(arg.parse().ok()?),
                "crash" => Directive::Crash,
                "garbage" => Directive::Garbage,
                "tag" => Directive::Tag(arg.to_string()),
                "size" => {
                    let (w, h) = arg.split_once('x')?;
                    Directive::Size(w.parse().ok()?, h.parse().ok()?)
                }
                "colors" => Directive::Colors(arg.parse().ok()?),
                "noimage" => Directive::NoImage,
                "badimage" => Directive::BadImage,
                "probe" => Directive::Probe(arg.to_string()),
                _ => return None,
            })
        })
        .collect()
}

/// Serves tasks from `input` until it closes.
pub fn serve(input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<WireRequest>(&line) {
            Ok(req) => match execute(&req)? {
                Some(resp) => resp,
                None => {
                    writeln!(output, "this is not json")?;
                    output.flush()?;
                    continue;
                }
            },
            Err(e) => WireResponse {
                task_id: String::new(),
                status: "exec_error".into(),
                stdout: String::new(),
                stderr: format!("could not parse request: {e}"),
                artifact_b64: None,
                wall_ms: 0,
            },
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

/// Entry point for the worker binaries.
pub fn run_stdio() -> io::Result<()> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve(stdin.lock(), stdout.lock())
}

/// Returns `None` when the task asked for a malformed reply.
fn execute(req: &WireRequest) -> io::Result<Option<WireResponse>> {
    let started = Instant::now();
    let budget = Duration::from_secs_f64(req.timeout_s.max(0.0));
    let workdir = tempfile::tempdir()?;
    let mut stdout = String::new();
    let mut stderr = String::new();
    let mut status = "ok";
    let mut tags = Vec::new();
    let mut size = (64, 48);
    let mut colors = None;
    let mut image = ImageMode::Normal;

    for d in parse_directives(&req.code) {
        match d {
            Directive::Print(t) => {
                stdout.push_str(&t);
                stdout.push('\n');
            }
            Directive::Stderr(t) => {
                stderr.push_str(&t);
                stderr.push('\n');
            }
            Directive::Sleep(ms) => {
                let want = Duration::from_millis(ms);
                let left = budget.saturating_sub(started.elapsed());
                if want > left {
                    std::thread::sleep(left);
                    status = "timeout";
                    stderr.push_str("time limit exceeded\n");
                    break;
                }
                std::thread::sleep(want);
            }
            Directive::Hang => loop {
                std::thread::sleep(Duration::from_secs(3600));
            },
            Directive::Exit(0) => break,
            Directive::Exit(code) => {
                status = "exec_error";
                stderr.push_str(&format!("process exited with code {code}\n"));
                break;
            }
            Directive::Crash => std::process::exit(101),
            Directive::Garbage => return Ok(None),
            Directive::Tag(t) => tags.push(t),
            Directive::Size(w, h) => size = (w.max(1), h.max(1)),
            Directive::Colors(n) => colors = Some(n.max(1)),
            Directive::NoImage => image = ImageMode::Missing,
            Directive::BadImage => image = ImageMode::Corrupt,
            Directive::Probe(token) => {
                let clean = probe(workdir.path(), &token)?;
                stdout.push_str(if clean { "clean\n" } else { "contaminated\n" });
            }
        }
    }

    let mut artifact_b64 = None;
    if req.kind == TaskKind::Render && status == "ok" {
        let path = workdir.path().join("image.png");
        match image {
            ImageMode::Normal => {
                let png = render_png(&req.code, size, colors, &tags);
                std::fs::write(&path, png)?;
            }
            ImageMode::Corrupt => std::fs::write(&path, b"not a png")?,
            ImageMode::Missing => {}
        }
        match std::fs::read(&path) {
            Ok(bytes) => {
                artifact_b64 = Some(base64::engine::general_purpose::STANDARD.encode(bytes))
            }
            Err(_) => {
                status = "exec_error";
                stderr.push_str("image.png was not written\n");
            }
        }
    }

    Ok(Some(WireResponse {
        task_id: req.task_id.clone(),
        status: status.into(),
        stdout,
        stderr,
        artifact_b64,
        wall_ms: started.elapsed().as_millis() as u64,
    }))
}

enum ImageMode {
    Normal,
    Missing,
    Corrupt,
}

fn probe(dir: &Path, token: &str) -> io::Result<bool> {
    let sentinel = dir.join("sentinel.txt");
    let before = std::fs::read_dir(dir)?.count();
    std::fs::write(&sentinel, token)?;
    std::thread::sleep(Duration::from_millis(5));
    let back = std::fs::read_to_string(&sentinel)?;
    let after = std::fs::read_dir(dir)?.count();
    Ok(before == 0 && after == 1 && back == token)
}

/// Deterministic striped RGB image whose palette is derived from the program
/// digest.
pub fn render_png(code: &str, (w, h): (u32, u32), colors: Option<u32>, tags: &[String]) -> Vec<u8> {
    let digest = Sha256::digest(code.as_bytes());
    let n_colors = colors.unwrap_or(2 + u32::from(digest[0]) % 7) as usize;
    let palette: Vec<[u8; 3]> = (0..n_colors)
        .map(|i| {
            let d = Sha256::new()
                .chain_update(digest)
                .chain_update((i as u32).to_le_bytes())
                .finalize();
            [d[0], d[1], d[2]]
        })
        .collect();
    let stripe = (w as usize).div_ceil(n_colors).max(1);
    let mut pixels = Vec::with_capacity((w * h * 3) as usize);
    for _y in 0..h {
        for x in 0..w as usize {
            pixels.extend_from_slice(&palette[(x / stripe).min(n_colors - 1)]);
        }
    }

    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk("source".into(), hex::encode(&digest[..8]))
        .expect("latin-1 keyword");
    for t in tags {
        enc.add_text_chunk("tag".into(), t.clone())
            .expect("latin-1 keyword");
    }
    let mut writer = enc.write_header().expect("in-memory png header");
    writer
        .write_image_data(&pixels)
        .expect("in-memory png data");
    writer.finish().expect("in-memory png finish");
    out
}
