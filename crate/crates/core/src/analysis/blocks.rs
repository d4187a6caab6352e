/// Splits model output into code cells.
///
/// Fenced regions are returned in order and everything outside them is
/// dropped. Output without any fence is treated as one code cell.
pub fn split_blocks(text: &str) -> Vec<String> {
    let mut cells = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    let mut saw_fence = false;
    for line in text.lines() {
        let is_fence = line.trim_start().starts_with("```");
        match (&mut current, is_fence) {
            (None, true) => {
                saw_fence = true;
                current = Some(Vec::new());
            }
            (Some(body), true) => {
                cells.push(body.join("\n"));
                current = None;
            }
            (Some(body), false) => body.push(line),
            (None, false) => {}
        }
    }
    if let Some(body) = current {
        // unterminated fence: keep what was written
        if !body.is_empty() {
            cells.push(body.join("\n"));
        }
    }
    if !saw_fence {
        return if text.trim().is_empty() {
            Vec::new()
        } else {
            vec![text.to_string()]
        };
    }
    cells.retain(|c| !c.trim().is_empty());
    cells
}

/// Comment-free, whitespace-collapsed form of a code cell used to decide
/// whether two cells are the same program text.
pub fn normalize_code(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    let chars: Vec<char> = code.chars().collect();
    let mut i = 0;
    let mut pending_space = false;
    let push = |out: &mut String, c: char, pending: &mut bool| {
        if *pending && !out.is_empty() {
            out.push(' ');
        }
        *pending = false;
        out.push(c);
    };
    while i < chars.len() {
        let c = chars[i];
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '\\' && chars.get(i + 1) == Some(&'\n') {
            pending_space = true;
            i += 2;
            continue;
        }
        if c.is_whitespace() {
            pending_space = true;
            i += 1;
            continue;
        }
        if c == '\'' || c == '"' {
            let triple = chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c);
            let quote_len = if triple { 3 } else { 1 };
            let start = i;
            i += quote_len;
            while i < chars.len() {
                if chars[i] == '\\' {
                    i += 2;
                    continue;
                }
                if chars[i] == c
                    && (!triple || (chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c)))
                {
                    i += quote_len;
                    break;
                }
                if !triple && chars[i] == '\n' {
                    break;
                }
                i += 1;
            }
            let end = i.min(chars.len());
            for (k, ch) in chars[start..end].iter().enumerate() {
                if k == 0 {
                    push(&mut out, *ch, &mut pending_space);
                } else {
                    out.push(*ch);
                }
            }
            continue;
        }
        push(&mut out, c, &mut pending_space);
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_fence() {
        let text = "```python\nx = 1\nprint(x)\n```";
        assert_eq!(split_blocks(text), vec!["x = 1\nprint(x)".to_string()]);
    }

    #[test]
    fn prose_and_two_fences() {
        let text = "Here you go:\n```python\na = 1\n```\nand then\n```\nb = a + 1\n```\nDone.";
        assert_eq!(split_blocks(text), vec!["a = 1".to_string(), "b = a + 1".to_string()]);
    }

    #[test]
    fn raw_code_is_one_cell() {
        let text = "import ee\nee.Initialize()\n";
        assert_eq!(split_blocks(text), vec![text.to_string()]);
        assert!(split_blocks("   \n").is_empty());
    }

    #[test]
    fn unterminated_fence_kept() {
        assert_eq!(split_blocks("```python\nx = 2\n"), vec!["x = 2".to_string()]);
    }

    #[test]
    fn normalization_ignores_comments_and_layout() {
        let a = "# load\nx = f(1,  2)   # call\n\n";
        let b = "x = f(1, 2)";
        assert_eq!(normalize_code(a), normalize_code(b));
        assert_eq!(normalize_code("s = '# not a comment'"), "s = '# not a comment'");
        assert_ne!(normalize_code("x = 1"), normalize_code("x = 2"));
        assert_eq!(
            normalize_code("a = gfw \\\n  .sum()"),
            normalize_code("a = gfw .sum()")
        );
    }
}
