"""Tests for the SDN WLAN controller and simulator."""
