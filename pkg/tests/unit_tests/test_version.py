def test_version_available() -> None:
    """Test that a version is available."""
    from wavedeband import __version__

    assert isinstance(__version__, str) and __version__
