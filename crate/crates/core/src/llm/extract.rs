//! Assembly extraction from model responses.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no assembly block found in the response")]
pub struct NoAssemblyBlock;

pub fn wrap_in_assembly_fence(asm: &str) -> String {
    format!("```assembly\n{asm}\n```")
}

/// Drops leading and trailing whitespace-only lines (and the final line
/// break); everything in between is kept byte-for-byte.
pub fn trim_blank_lines(text: &str) -> &str {
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            start += line.len();
        } else {
            break;
        }
    }
    let rest = &text[start..];
    let (mut end, mut pos) = (0, 0);
    for line in rest.split_inclusive('\n') {
        if !line.trim().is_empty() {
            end = pos + line.trim_end_matches('\n').len();
        }
        pos += line.len();
    }
    &rest[..end]
}

/// Returns the contents of the last fenced block whose info string is
/// `assembly`. An unterminated final block runs to the end of the text.
pub fn extract_assembly(content: &str) -> Result<String, NoAssemblyBlock> {
    let mut last: Option<(usize, usize)> = None;
    let mut open: Option<(bool, usize)> = None;
    let mut offset = 0;
    for line in content.split_inclusive('\n') {
        let bare = line.trim_end_matches(['\n', '\r']);
        match open {
            None => {
                if let Some(info) = bare.trim_start().strip_prefix("```") {
                    let is_asm = info.trim().eq_ignore_ascii_case("assembly");
                    open = Some((is_asm, offset + line.len()));
                }
            }
            Some((is_asm, body_start)) => {
                if bare.trim() == "```" {
                    if is_asm {
                        last = Some((body_start, offset));
                    }
                    open = None;
                }
            }
        }
        offset += line.len();
    }
    if let Some((true, body_start)) = open {
        last = Some((body_start, content.len()));
    }
    let (start, end) = last.ok_or(NoAssemblyBlock)?;
    Ok(trim_blank_lines(&content[start..end]).to_string())
}
