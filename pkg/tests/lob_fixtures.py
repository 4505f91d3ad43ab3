"""Hand-built message/order-book files with two complete races.

Prices are in 1/100 of a tick (tick = 100).  Unit sizes are
S_l = 100, S_m = 700 / 5 = 140, S_c = 350 / 4 = 87.5.

Up race on quote (102, 101) from t=2 to t=5, D = 3:
  counts ask (m, l, c) = (1, 1, 1), bid = (1, 1, 1)
  ask volume 400*0.8 + 500*0.2 + 400*0.5 + 350*1.5 = 1145 share-seconds
  bid volume 100*0.5 + 200*0.7 + 100*1.8 = 370
Down race on quote (101, 100) from t=5 to t=7, D = 2:
  counts ask = (1, 1, 1), bid = (1, 1, 1)
  ask volume 100*1 + 200*0.5 + 100*0.5 = 250
  bid volume 300*0.5 + 200*0.3 + 100*0.4 + 200*0.8 = 410
"""

MESSAGES = [
    # time, type, id, size, price, direction ; ask_p, ask_s, bid_p, bid_s
    (1.0, 1, 1, 100, 10100, -1, 10100, 300, 10000, 200),
    (2.0, 4, 2, 300, 10100, -1, 10200, 400, 10000, 200),  # ask 101 empties
    (2.0, 1, 3, 100, 10100, 1, 10200, 400, 10100, 100),  # new bid 101: up race starts
    (2.5, 1, 4, 100, 10100, 1, 10200, 400, 10100, 200),
    (2.8, 1, 5, 100, 10200, -1, 10200, 500, 10100, 200),
    (3.0, 4, 6, 100, 10200, -1, 10200, 400, 10100, 200),
    (3.2, 4, 7, 100, 10100, 1, 10200, 400, 10100, 100),
    (3.5, 3, 8, 50, 10200, -1, 10200, 350, 10100, 100),
    (4.0, 1, 9, 100, 10000, 1, 10200, 350, 10100, 100),  # behind the best bid
    (5.0, 3, 10, 100, 10100, 1, 10200, 350, 10000, 300),  # bid 101 empties
    (5.0, 1, 11, 100, 10100, -1, 10100, 100, 10000, 300),  # new ask 101: down race starts
    (5.5, 4, 12, 100, 10000, 1, 10100, 100, 10000, 200),
    (5.8, 3, 13, 100, 10000, 1, 10100, 100, 10000, 100),
    (6.0, 1, 14, 100, 10100, -1, 10100, 200, 10000, 100),
    (6.0, 5, 15, 100, 10050, 1, 10100, 200, 10000, 100),  # hidden execution
    (6.2, 1, 16, 100, 10000, 1, 10100, 200, 10000, 200),
    (6.5, 3, 17, 100, 10100, -1, 10100, 100, 10000, 200),
    (7.0, 4, 18, 100, 10100, -1, 10200, 500, 10000, 200),  # ask 101 empties
]

UNIT_SIZES = (100.0, 140.0, 87.5)
DURATION = {1: 3.0, -1: 2.0}
VOLUME = {(1, "ask"): 1145.0, (1, "bid"): 370.0, (-1, "ask"): 250.0, (-1, "bid"): 410.0}


def write_pair(rows, directory, stem="day"):
    msg = directory / f"{stem}_message.csv"
    ob = directory / f"{stem}_orderbook.csv"
    msg.write_text("".join(",".join(str(x) for x in r[:6]) + "\n" for r in rows))
    ob.write_text("".join(",".join(str(x) for x in r[6:]) + "\n" for r in rows))
    return msg, ob


def two_race_files(directory):
    return write_pair(MESSAGES, directory)
