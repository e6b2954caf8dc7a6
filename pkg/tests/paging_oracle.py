"""Reference page-replacement simulators used as test oracles.

They replay the page-touch sequence produced by accessing byte ranges of
regions.  An access is processed in chunks of ``chunk_pages`` pages; pages of
the chunk already visited stay pinned (not evictable) until the chunk ends.
A missing page takes the lowest-numbered free frame if there is one.
"""

from collections import OrderedDict


def chunked_pages(offset, length, page_size, chunk_pages):
    """Yield lists of page indexes in the order an access touches them."""
    if length <= 0:
        return
    end = offset + length
    lo = offset // page_size
    last = -(-end // page_size)
    while lo < last:
        hi = min(lo + chunk_pages, last)
        yield list(range(lo, hi))
        lo = hi


def simulate_lru(trace, nframes):
    """``trace`` is a list of chunks of page keys.  Returns the victim keys in order."""
    resident = OrderedDict()
    victims = []
    for chunk in trace:
        pinned = set()
        for page in chunk:
            if page in resident:
                resident.move_to_end(page)
            else:
                if len(resident) >= nframes:
                    victim = next(p for p in resident if p not in pinned)
                    del resident[victim]
                    victims.append(victim)
                resident[page] = True
            pinned.add(page)
    return victims


def simulate_clock(trace, nframes):
    owner = [None] * nframes
    ref = [False] * nframes
    where = {}
    hand = 0
    victims = []
    for chunk in trace:
        pinned = set()
        for page in chunk:
            if page in where:
                f = where[page]
            else:
                if len(where) < nframes:
                    # traces never free pages, so frames fill in index order
                    f = len(where)
                else:
                    while True:
                        f = hand
                        hand = (hand + 1) % nframes
                        if f in pinned:
                            continue
                        if ref[f]:
                            ref[f] = False
                            continue
                        break
                    victims.append(owner[f])
                    del where[owner[f]]
                owner[f] = page
                where[page] = f
            ref[f] = True
            pinned.add(f)
    return victims
