"""Tokenization helpers shared by retrieval, evaluation and dataset linting."""
import re
from typing import FrozenSet, List, Optional, Sequence

_TOKEN_RE = re.compile(r'[^\W_]+', re.UNICODE)

# Function words only; question words (who, what, where, ...) carry intent and stay.
STOPWORDS: FrozenSet[str] = frozenset({
    'a', 'an', 'the', 'and', 'or', 'but', 'if', 'then', 'so', 'of', 'to', 'in',
    'on', 'at', 'by', 'for', 'with', 'about', 'from', 'into', 'over', 'as',
    'is', 'are', 'was', 'were', 'be', 'been', 'being', 'am', 'do', 'does',
    'did', 'has', 'have', 'had', 'it', 'its', 'this', 'that', 'these',
    'those', 'there', 'here', 'i', 'me', 'my', 'you', 'your', 'he', 'him',
    'his', 'she', 'her', 'we', 'us', 'our', 'they', 'them', 'their', 'can',
    'could', 'would', 'should', 'will', 'shall', 'may', 'might', 'must',
    'not', 'no', 'any', 'some', 'such', 'than', 'too', 'very', 'just',
    'also', 'up', 'down', 'out', 'off', 'again', 'further', 'once', 's', 't',
})


def tokenize(text: str) -> List[str]:
    """Lowercase and split on non-alphanumerics, dropping empty pieces."""
    if not text:
        return []
    return _TOKEN_RE.findall(text.lower())


def content_tokens(text: str) -> List[str]:
    """Tokens of ``text`` with stopwords removed, order kept."""
    return [tok for tok in tokenize(text) if tok not in STOPWORDS]


def find_token_span(haystack: Sequence[str], needle: Sequence[str]) -> Optional[int]:
    """Return the start of ``needle`` as a contiguous run in ``haystack``, or None."""
    n = len(needle)
    if n == 0 or n > len(haystack):
        return None
    first = needle[0]
    for start in range(len(haystack) - n + 1):
        if haystack[start] == first and list(haystack[start:start + n]) == list(needle):
            return start
    return None


def mentions(text: str, names: Sequence[str]) -> Optional[str]:
    """Return the first name (normalized) that occurs in ``text`` as a token run."""
    tokens = tokenize(text)
    for name in names:
        name_tokens = tokenize(name)
        if name_tokens and find_token_span(tokens, name_tokens) is not None:
            return ' '.join(name_tokens)
    return None
