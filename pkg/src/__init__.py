"""SDN WLAN RAN controller and PROPOSED vs SPLITMAC simulator."""
