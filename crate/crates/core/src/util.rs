use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

/// Runs `f` over `items` on up to `concurrency` threads. Results come back in
/// input order. After the first `Err`, no new items are started; items never
/// started come back as `None`.
pub fn parallel_try_map<T, R, E, F>(items: &[T], concurrency: usize, f: F) -> Vec<Option<Result<R, E>>>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let slots: Vec<Mutex<Option<Result<R, E>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = concurrency.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let result = f(i, &items[i]);
                if result.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().expect("slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot poisoned"))
        .collect()
}

/// Infallible variant of [`parallel_try_map`].
pub fn parallel_map<T, R, F>(items: &[T], concurrency: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    parallel_try_map::<T, R, std::convert::Infallible, _>(items, concurrency, |i, t| Ok(f(i, t)))
        .into_iter()
        .map(|r| match r {
            Some(Ok(v)) => v,
            _ => unreachable!("infallible map leaves no gaps"),
        })
        .collect()
}

/// Write via a temp file in the same directory, then rename into place.
pub fn atomic_write(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Keeps the first `head` and last `tail` characters, joined by an elision
/// marker. Returns the text unchanged when it already fits.
pub fn head_tail(text: &str, head: usize, tail: usize) -> (String, bool) {
    let total = text.chars().count();
    if total <= head + tail {
        return (text.to_string(), false);
    }
    let head_part: String = text.chars().take(head).collect();
    let tail_part: String = text.chars().skip(total - tail).collect();
    let elided = total - head - tail;
    (
        format!("{head_part}\n[... {elided} characters elided ...]\n{tail_part}"),
        true,
    )
}

/// First `cap` characters plus a truncation marker when cut.
pub fn truncate_chars(text: &str, cap: usize) -> String {
    let total = text.chars().count();
    if total <= cap {
        return text.to_string();
    }
    let mut out: String = text.chars().take(cap).collect();
    out.push_str(&format!("\n[... truncated {} characters ...]\n", total - cap));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_input_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = parallel_map(&items, 8, |_, x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn parallel_try_map_stops_after_error() {
        let items: Vec<u32> = (0..100).collect();
        let out = parallel_try_map(&items, 1, |_, x| if *x == 3 { Err("boom") } else { Ok(*x) });
        assert!(matches!(out[3], Some(Err("boom"))));
        assert!(out[4..].iter().all(Option::is_none));
    }

    #[test]
    fn head_tail_marks_elision() {
        let (text, cut) = head_tail("abcdefghij", 3, 2);
        assert!(cut);
        assert!(text.starts_with("abc\n"));
        assert!(text.ends_with("\nij"));
        assert!(text.contains("5 characters elided"));
        assert_eq!(head_tail("abc", 3, 2), ("abc".to_string(), false));
    }
}
